"""
Latent-conditioned denoising diffusion decoder

Images stay on the [0, 1] scale throughout. The denoiser predicts the
noise that was mixed into ``x_n`` given the step index and the dequantized
latent, which is nearest-upsampled to image resolution and concatenated to
the noisy input.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .codec import LATENT_STRIDE, QuantizedLatent, StepLadder, dequantize
from .errors import DataError, NumericsError, TrainingDivergedError
from .imaging import ImagePlane
from .layers import Conv2d, ConvTranspose2d, Linear, Module
from .numerics import Adam, Tensor, concat, mse, no_grad, silu, upsample_nearest

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
MAX_BETA = 0.999
EMBED_DIM = 32


class VarianceSchedule:
    """Cumulative signal-retention factors alpha_bar[0..N] with alpha_bar[0] = 1"""

    def __init__(self, alpha_bar: Sequence[float]):
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if alpha_bar.ndim != 1 or alpha_bar.size < 2 or alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar must start at exactly 1 and have at least one step")
        if np.any(np.diff(alpha_bar) > 0) or alpha_bar.min() < 0:
            raise ValueError("alpha_bar must be non-increasing and non-negative")
        self.alpha_bar = alpha_bar

    @classmethod
    def cosine(cls, steps: int = 50, offset: float = COSINE_OFFSET) -> "VarianceSchedule":
        if steps < 1:
            raise ValueError("schedule needs at least one step")
        t = np.arange(steps + 1) / steps
        f = np.cos((t + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
        raw = f / f[0]
        betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, MAX_BETA)
        return cls(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    @property
    def steps(self) -> int:
        return self.alpha_bar.size - 1

    def __repr__(self):
        return f"VarianceSchedule(steps={self.steps})"


def forward_diffuse(x0: np.ndarray, n: int, noise: np.ndarray, schedule: VarianceSchedule) -> np.ndarray:
    if not 0 <= n <= schedule.steps:
        raise ValueError(f"step {n} outside [0, {schedule.steps}]")
    a = schedule.alpha_bar[n]
    return np.sqrt(a) * np.asarray(x0) + np.sqrt(1.0 - a) * np.asarray(noise)


def timestep_embedding(steps: Union[int, Sequence[int], np.ndarray], dim: int = EMBED_DIM) -> np.ndarray:
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = steps[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class DenoiserNet(Module):
    """Two-level U-shaped noise predictor conditioned on the latent"""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 8, base_channels: int = 32):
        b = base_channels
        self.latent_channels = latent_channels
        self.base_channels = base_channels
        self.in_conv = Conv2d(3 + latent_channels, b, 3, rng, padding=1)
        self.down1 = Conv2d(b, 2 * b, 3, rng, stride=2, padding=1)
        self.down2 = Conv2d(2 * b, 2 * b, 3, rng, stride=2, padding=1)
        self.up1 = ConvTranspose2d(2 * b, 2 * b, 4, rng, stride=2, padding=1)
        self.up2 = ConvTranspose2d(4 * b, b, 4, rng, stride=2, padding=1)
        self.out_conv = Conv2d(2 * b, 3, 3, rng, padding=1, zero_init=True)
        self.time_in = Linear(EMBED_DIM, b, rng)
        self.time_down1 = Linear(EMBED_DIM, 2 * b, rng)
        self.time_down2 = Linear(EMBED_DIM, 2 * b, rng)
        self.time_up1 = Linear(EMBED_DIM, 2 * b, rng)
        self.time_up2 = Linear(EMBED_DIM, b, rng)

    @staticmethod
    def _stage_bias(layer: Linear, embedding: Tensor) -> Tensor:
        out = layer(embedding)
        return out.reshape(out.shape[0], out.shape[1], 1, 1)

    def forward(self, x: Tensor, steps, latent: Tensor) -> Tensor:
        """Predict the noise in ``x`` (N, 3, H, W) from ``latent`` (N, C, H/4, W/4)"""
        embedding = Tensor(timestep_embedding(steps))
        cond = upsample_nearest(latent, LATENT_STRIDE)
        h0 = silu(self.in_conv(concat([x, cond], axis=1)) + self._stage_bias(self.time_in, embedding))
        d1 = silu(self.down1(h0) + self._stage_bias(self.time_down1, embedding))
        d2 = silu(self.down2(d1) + self._stage_bias(self.time_down2, embedding))
        u1 = silu(self.up1(d2) + self._stage_bias(self.time_up1, embedding))
        u2 = silu(self.up2(concat([u1, d1], axis=1)) + self._stage_bias(self.time_up2, embedding))
        return self.out_conv(concat([u2, h0], axis=1))

    def predict(self, x: np.ndarray, n: int, latent: np.ndarray) -> np.ndarray:
        with no_grad():
            return self(Tensor(x), [n] * x.shape[0], Tensor(latent)).data


NoisePredictor = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


@dataclass
class SamplerConfig:
    seed: int = 0
    stochastic: bool = False
    steps: Optional[int] = None
    clip_denoised: bool = True


def sampling_steps(schedule: VarianceSchedule, steps: Optional[int] = None) -> List[int]:
    """Descending step indices visited by the reverse loop, evenly skipped"""
    total = schedule.steps
    if steps is None or steps >= total:
        return list(range(total, 0, -1))
    if steps < 1:
        raise ValueError("sampler needs at least one step")
    chosen = np.unique(np.round(np.linspace(1, total, steps)).astype(int))
    return chosen[::-1].tolist()


def sample(predict: NoisePredictor, latent: np.ndarray, shape: Tuple[int, ...],
           schedule: VarianceSchedule, config: SamplerConfig,
           callback: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None) -> np.ndarray:
    """Run the reverse loop from pure noise; returns the unclamped final estimate

    ``callback(n, x_prev, x0_estimate)`` is called after every step.
    """
    rng = np.random.default_rng(config.seed)
    x = rng.standard_normal(shape)
    visited = sampling_steps(schedule, config.steps)
    ab = schedule.alpha_bar
    for i, n in enumerate(visited):
        prev = visited[i + 1] if i + 1 < len(visited) else 0
        eps = predict(x, n, latent)
        x0 = (x - np.sqrt(1.0 - ab[n]) * eps) / np.sqrt(ab[n])
        if config.clip_denoised:
            x0 = np.clip(x0, 0.0, 1.0)
            eps = (x - np.sqrt(ab[n]) * x0) / np.sqrt(1.0 - ab[n])
        if config.stochastic:
            alpha = ab[n] / ab[prev]
            beta = 1.0 - alpha
            mean = (np.sqrt(ab[prev]) * beta * x0 + np.sqrt(alpha) * (1.0 - ab[prev]) * x) / (1.0 - ab[n])
            if prev > 0:
                variance = beta * (1.0 - ab[prev]) / (1.0 - ab[n])
                x = mean + np.sqrt(variance) * rng.standard_normal(shape)
            else:
                x = mean
        else:
            x = np.sqrt(ab[prev]) * x0 + np.sqrt(1.0 - ab[prev]) * eps
        if callback is not None:
            callback(prev, x, x0)
    return x


def reconstruct(latent: QuantizedLatent, dims: Tuple[int, int],
                net: Union["DenoiserNet", NoisePredictor], schedule: VarianceSchedule,
                config: SamplerConfig, ladder: StepLadder = StepLadder(),
                callback=None) -> ImagePlane:
    """Decode an image of size ``dims`` from a quantized latent"""
    predict = net.predict if isinstance(net, DenoiserNet) else net
    cond = dequantize(latent, ladder)[None]
    shape = (1, 3, cond.shape[2] * LATENT_STRIDE, cond.shape[3] * LATENT_STRIDE)
    x = sample(predict, cond, shape, schedule, config, callback=callback)
    height, width = dims
    x = x[:, :, :height, :width]
    clamp_fraction = float(np.mean((x < 0.0) | (x > 1.0)))
    image = ImagePlane.from_chw(x)
    image.metadata["clamp_fraction"] = clamp_fraction
    return image


def denoiser_loss(net: DenoiserNet, x0: np.ndarray, latent: Union[np.ndarray, Tensor],
                  schedule: VarianceSchedule, rng: np.random.Generator) -> Tensor:
    """Noise-prediction MSE at one random step per batch element"""
    batch = x0.shape[0]
    steps = rng.integers(1, schedule.steps + 1, size=batch)
    noise = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[steps][:, None, None, None]
    x_n = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    latent = latent if isinstance(latent, Tensor) else Tensor(latent)
    return mse(net(Tensor(x_n), steps, latent), Tensor(noise))


def train_denoiser(dataset: Sequence[Tuple[ImagePlane, np.ndarray]], schedule: VarianceSchedule,
                   steps: int, seed: int = 0, lr: float = 1e-3, base_channels: int = 32,
                   net: Optional[DenoiserNet] = None, history: Optional[List[float]] = None,
                   log_interval: int = 100) -> DenoiserNet:
    """Fit a denoiser on (image, dequantized latent) pairs

    Images must already be padded to a multiple of the latent stride.
    """
    if not dataset:
        raise DataError("cannot train a denoiser on an empty dataset")
    rng = np.random.default_rng(seed)
    latent_channels = dataset[0][1].shape[0]
    if net is None:
        net = DenoiserNet(rng, latent_channels=latent_channels, base_channels=base_channels)
    optimizer = Adam(net.parameters(), lr=lr)

    for step in range(1, steps + 1):
        image, latent = dataset[int(rng.integers(len(dataset)))]
        try:
            loss = denoiser_loss(net, image.to_chw(), latent[None], schedule, rng)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        except NumericsError as exc:
            raise TrainingDivergedError(step, float("nan"), "denoiser training") from exc
        value = loss.item()
        if history is not None:
            history.append(value)
        if log_interval and step % log_interval == 0:
            logger.info("denoiser step %d/%d loss %.5f", step, steps, value)
    return net
