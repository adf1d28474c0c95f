"""
Experiment orchestration: joint training, compression, decompression,
evaluation and rate-distortion sweeps
"""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binomtest

from .allocator import (AdaptationResult, AllocatorNets, CodecEnvironment, DualController,
                        adapt_per_image, state_dim)
from .checkpoint import load_checkpoint, merge_states, save_checkpoint, split_state
from .codec import Bitstream, EncoderNet, StepLadder, deserialize, encode_latent
from .config import RunConfig, parse_config
from .diffusion import DenoiserNet, SamplerConfig, VarianceSchedule, denoiser_loss, reconstruct
from .entropy import EntropyModel, fit_entropy_model
from .errors import (ConfigError, DataError, InfeasibleBudgetError, ModelMismatchError, NumericsError,
                     TrainingDivergedError)
from .fsutil import atomic_write_bytes, atomic_write_text, file_hash, write_manifest
from .imaging import PPM_SUFFIXES, ImagePlane, load_image, partition, save_image
from .metrics import CSV_COLUMNS, MetricReport, evaluate
from .numerics import Adam, Tensor, interval_bits
from .synthetic import write_dataset

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = PPM_SUFFIXES | {".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff"}


# Trained models

@dataclass
class CodecBundle:
    """Everything a compress or decompress run needs from training"""
    encoder: EncoderNet
    denoiser: DenoiserNet
    model: EntropyModel
    schedule: VarianceSchedule
    ladder: StepLadder
    block_size: int

    @classmethod
    def create(cls, config: RunConfig, seed: Optional[int] = None) -> "CodecBundle":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        channels = config.codec.latent_channels
        hidden = tuple(config.codec.encoder_hidden)
        if len(hidden) != 2:
            raise DataError("codec.encoder_hidden must list two channel counts")
        return cls(
            encoder=EncoderNet(rng, latent_channels=channels, hidden=hidden),
            denoiser=DenoiserNet(rng, latent_channels=channels, base_channels=config.diffusion.base_channels),
            model=EntropyModel(np.ones(channels)),
            schedule=VarianceSchedule.cosine(config.diffusion.schedule_steps),
            ladder=StepLadder(tuple(config.codec.steps)),
            block_size=config.codec.block_size,
        )

    def state_dict(self) -> Dict[str, np.ndarray]:
        return merge_states(encoder=self.encoder.state_dict(), denoiser=self.denoiser.state_dict(),
                            entropy={"scales": self.model.scales.copy()})

    def save(self, path: Union[str, Path], config: RunConfig) -> Path:
        return save_checkpoint(path, self.state_dict(), metadata=config.to_text())

    @classmethod
    def load(cls, path: Union[str, Path]) -> Tuple["CodecBundle", RunConfig]:
        state, metadata = load_checkpoint(path)
        trained_config = parse_config(metadata)
        bundle = cls.create(trained_config)
        try:
            bundle.encoder.load_state_dict(split_state(state, "encoder"))
            bundle.denoiser.load_state_dict(split_state(state, "denoiser"))
            bundle.model = EntropyModel(split_state(state, "entropy")["scales"])
        except (KeyError, ValueError, NumericsError) as exc:
            raise ModelMismatchError(f"{path}: checkpoint does not match its recorded architecture ({exc})") from exc
        return bundle, trained_config


def padded(image: ImagePlane, block_size: int) -> ImagePlane:
    return partition(image, block_size).padded


def train_models(images: Sequence[ImagePlane], config: RunConfig,
                 log_rows: Optional[List[Dict[str, float]]] = None) -> CodecBundle:
    """Jointly fit encoder and denoiser on rate plus noise-prediction error

    The latent is relaxed with additive uniform noise: unit width for the rate
    term, and the width of a randomly drawn ladder step for the conditioning
    the denoiser sees. Entropy-model scales are refit from clean latents every
    ``train.refit_interval`` steps.
    """
    if not images:
        raise DataError("no training images")
    rng = np.random.default_rng(config.seed)
    bundle = CodecBundle.create(config)
    train = config.train
    data = [padded(image, bundle.block_size) for image in images]
    params = bundle.encoder.parameters() + bundle.denoiser.parameters()
    optimizer = Adam(params, lr=train.lr)

    def refit():
        bundle.model = fit_entropy_model([encode_latent(image, bundle.encoder) for image in data])

    refit()
    for step in range(1, train.steps + 1):
        image = data[int(rng.integers(len(data)))]
        x = image.to_chw()
        step_size = bundle.ladder.steps[int(rng.integers(len(bundle.ladder)))]
        try:
            z = bundle.encoder(Tensor(x))
            rate_noise = rng.uniform(-0.5, 0.5, size=z.shape)
            scales = bundle.model.scales.reshape(1, -1, 1, 1)
            rate = interval_bits(z + Tensor(rate_noise), scales).sum() * (1.0 / image.pixels)
            cond_noise = rng.uniform(-0.5, 0.5, size=z.shape) * step_size
            distortion = denoiser_loss(bundle.denoiser, x, z + Tensor(cond_noise), bundle.schedule, rng)
            loss = rate * train.rate_weight + distortion * config.metrics.fidelity
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        except NumericsError as exc:
            raise TrainingDivergedError(step, float("nan"), "codec training") from exc

        if log_rows is not None:
            log_rows.append({"step": step, "rate_loss": rate.item(), "distortion_loss": distortion.item()})
        if train.refit_interval and step % train.refit_interval == 0:
            refit()
        if train.log_interval and step % train.log_interval == 0:
            logger.info("train step %d/%d rate %.4f bpp, noise mse %.5f", step, train.steps,
                        rate.item(), distortion.item())
    refit()
    return bundle


# Compression

@dataclass
class CompressionResult:
    bitstream: Bitstream
    actions: np.ndarray
    mode: str
    r_max: float
    adaptation: Optional[AdaptationResult] = None

    @property
    def r_tot(self) -> int:
        return self.bitstream.total_bits

    @property
    def feasible(self) -> bool:
        return self.r_tot <= self.r_max


def parse_mode(mode: str, num_actions: int) -> Tuple[str, Optional[int]]:
    """('ppo', None), ('uniform', None) for the finest fitting level, or ('uniform', k-1)"""
    if mode == "ppo":
        return "ppo", None
    if mode == "uniform":
        return "uniform", None
    if mode.startswith("uniform-"):
        try:
            level = int(mode.split("-", 1)[1])
        except ValueError:
            level = 0
        if 1 <= level <= num_actions:
            return "uniform", level - 1
    raise ConfigError(f"unknown mode '{mode}'; expected ppo, uniform or uniform-1..uniform-{num_actions}")


def build_environment(image: ImagePlane, bundle: CodecBundle, config: RunConfig, r_max: float,
                      seed: Optional[int] = None) -> CodecEnvironment:
    sampler = SamplerConfig(seed=config.seed if seed is None else seed,
                            stochastic=config.diffusion.stochastic,
                            steps=config.diffusion.adapt_sampler_steps or None,
                            clip_denoised=config.diffusion.clip_denoised)
    return CodecEnvironment(image, bundle.encoder, bundle.model, bundle.denoiser, bundle.schedule, r_max,
                            ladder=bundle.ladder, block_size=bundle.block_size, sampler=sampler,
                            weights=config.metrics.weights(), perceptual=config.metrics.perceptual)


def create_allocator(bundle: CodecBundle, config: RunConfig) -> AllocatorNets:
    return AllocatorNets.create(state_dim(bundle.encoder.latent_channels), len(bundle.ladder),
                                config.ppo, seed=config.seed)


def compress_image(image: ImagePlane, bundle: CodecBundle, config: RunConfig, mode: str,
                   r_max: float, nets: Optional[AllocatorNets] = None,
                   report_path: Optional[Union[str, Path]] = None,
                   report_header: Sequence[str] = ()) -> CompressionResult:
    env = build_environment(image, bundle, config, r_max)
    coarsest = env.encode([0] * env.num_blocks)
    if coarsest.total_bits > r_max:
        raise InfeasibleBudgetError(coarsest.total_bits, r_max, image.metadata.get("source"))

    kind, level = parse_mode(mode, env.num_actions)
    if kind == "uniform":
        if level is None:
            level, stream = 0, coarsest
            for k in range(env.num_actions - 1, 0, -1):
                candidate = env.encode([k] * env.num_blocks)
                if candidate.total_bits <= r_max:
                    level, stream = k, candidate
                    break
        else:
            stream = env.encode([level] * env.num_blocks)
            if stream.total_bits > r_max:
                logger.warning("uniform-%d uses %d bits, over the %.0f-bit budget",
                               level + 1, stream.total_bits, r_max)
        return CompressionResult(stream, np.full(env.num_blocks, level), f"uniform-{level + 1}", r_max)

    nets = nets or create_allocator(bundle, config)
    dual = DualController(r_max=r_max, step=config.ppo.dual_step)
    result = adapt_per_image(env, nets, config.ppo, dual, seed=config.seed,
                             report_path=report_path, report_header=report_header)
    best = result.best
    stream = best.outcome.bitstream
    actions = best.actions
    if stream.total_bits > r_max:
        logger.warning("no adapted allocation met the budget; falling back to the coarsest level")
        stream, actions = coarsest, np.zeros(env.num_blocks, dtype=np.int64)
    return CompressionResult(stream, np.asarray(actions), "ppo", r_max, adaptation=result)


def decompress_bytes(data: bytes, bundle: CodecBundle, config: RunConfig,
                     seed: Optional[int] = None) -> ImagePlane:
    decoded = deserialize(data)
    if decoded.symbols.shape[0] != bundle.encoder.latent_channels:
        raise ModelMismatchError(
            f"stream has {decoded.symbols.shape[0]} latent channels, checkpoint has "
            f"{bundle.encoder.latent_channels}"
        )
    if decoded.num_actions != len(bundle.ladder):
        raise ModelMismatchError(f"stream uses {decoded.num_actions} levels, checkpoint has {len(bundle.ladder)}")
    sampler = SamplerConfig(seed=config.seed if seed is None else seed,
                            stochastic=config.diffusion.stochastic,
                            steps=config.diffusion.sampler_steps or None,
                            clip_denoised=config.diffusion.clip_denoised)
    image = reconstruct(decoded.latent, (decoded.height, decoded.width), bundle.denoiser,
                        bundle.schedule, sampler, bundle.ladder)
    clamp = image.metadata.get("clamp_fraction", 0.0)
    if clamp:
        logger.info("clamped %.2f%% of reconstructed values", 100.0 * clamp)
    return image


# Records and tables

@dataclass
class RDRecord:
    image_id: str
    method: str
    bits: int
    pixels: int
    r_max: float
    report: MetricReport

    @property
    def bpp(self) -> float:
        return self.bits / self.pixels

    @property
    def ratio(self) -> float:
        return 24.0 * self.pixels / self.bits

    COLUMNS = ("image", "method", "r_max", "bits", "bpp", "ratio") + CSV_COLUMNS

    def to_row(self) -> List[object]:
        return [self.image_id, self.method, f"{self.r_max:.0f}", self.bits, f"{self.bpp:.6f}",
                f"{self.ratio:.6f}"] + [f"{v:.9g}" for v in self.report.to_row()]


def provenance_lines(config: RunConfig, checkpoints: Sequence[Union[str, Path]] = ()) -> List[str]:
    lines = [f"checkpoint {Path(p).name} {file_hash(p)}" for p in checkpoints if Path(p).exists()]
    lines.extend(line for line in config.to_text().splitlines() if line)
    return lines


def render_csv(columns: Sequence[str], rows: Sequence[Sequence[object]], header_lines: Sequence[str] = ()) -> str:
    buffer = io.StringIO()
    for line in header_lines:
        buffer.write(f"# {line}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buffer.getvalue()


def list_images(directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_images(directory: Union[str, Path]) -> List[ImagePlane]:
    paths = list_images(directory)
    if not paths:
        raise DataError(f"{directory}: no images found")
    return [load_image(p) for p in paths]


# Evaluation

@dataclass
class EvaluationResult:
    rows: List[Tuple[str, MetricReport]]
    unpaired: List[str]

    def means(self) -> List[float]:
        return [float(np.mean([getattr(r, c) for _, r in self.rows])) for c in CSV_COLUMNS]

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        body = [[name] + [f"{v:.12g}" for v in report.to_row()] for name, report in self.rows]
        if self.rows:
            body.append(["mean"] + [f"{v:.12g}" for v in self.means()])
        return render_csv(("image",) + CSV_COLUMNS, body, header_lines)


def evaluate_directories(originals: Union[str, Path], reconstructions: Union[str, Path],
                         config: RunConfig) -> EvaluationResult:
    left = {p.stem: p for p in list_images(originals)}
    right = {p.stem: p for p in list_images(reconstructions)}
    unpaired = sorted((set(left) ^ set(right)))
    for name in unpaired:
        logger.warning("no partner for %s; skipped", name)
    rows = []
    for name in sorted(set(left) & set(right)):
        report = evaluate(load_image(left[name]), load_image(right[name]), config.metrics.weights(),
                          config.metrics.perceptual)
        rows.append((name, report))
    return EvaluationResult(rows=rows, unpaired=unpaired)


# Rate-distortion sweep

def score_image(name: str, image: ImagePlane, bundle: CodecBundle, config: RunConfig, mode: str,
                budget: float, nets: Optional[AllocatorNets] = None) -> RDRecord:
    """Compress at ``budget``, decode the stream and score the reconstruction"""
    result = compress_image(image, bundle, config, mode, budget, nets=nets)
    recon = decompress_bytes(result.bitstream.data, bundle, config)
    report = evaluate(image, recon, config.metrics.weights(), config.metrics.perceptual)
    return RDRecord(name, result.mode, result.r_tot, image.pixels, budget, report)


def rd_sweep(images: Sequence[Tuple[str, ImagePlane]], bundle: CodecBundle, config: RunConfig,
             budgets: Sequence[float], modes: Sequence[str] = ("ppo", "uniform"),
             nets: Optional[AllocatorNets] = None) -> List[RDRecord]:
    """Compress, decode and score every image at every budget and mode; sorted by bpp"""
    records = []
    shared = nets
    for name, image in images:
        for budget in budgets:
            for mode in modes:
                if mode == "ppo" and (shared is None or config.ppo.reset_per_image):
                    shared = create_allocator(bundle, config)
                try:
                    records.append(score_image(name, image, bundle, config, mode, budget, nets=shared))
                except InfeasibleBudgetError as exc:
                    logger.warning("%s at %.0f bits: %s", name, budget, exc)
    records.sort(key=lambda r: (r.bpp, r.method, r.image_id))
    return records


@dataclass
class ComparisonResult:
    mean_ppo: float
    mean_uniform: float
    wins: int
    losses: int
    ties: int
    p_value: float


def compare_allocation(ppo_utilities: Sequence[float], uniform_utilities: Sequence[float]) -> ComparisonResult:
    """Paired one-sided sign test that adapted allocation beats the uniform baseline"""
    ppo = np.asarray(ppo_utilities, dtype=np.float64)
    uniform = np.asarray(uniform_utilities, dtype=np.float64)
    if ppo.shape != uniform.shape or ppo.size == 0:
        raise DataError("need the same non-zero number of paired utilities")
    diff = ppo - uniform
    wins = int(np.sum(diff > 0))
    losses = int(np.sum(diff < 0))
    ties = int(diff.size - wins - losses)
    trials = wins + losses
    p_value = binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return ComparisonResult(float(ppo.mean()), float(uniform.mean()), wins, losses, ties, float(p_value))


@dataclass
class AllocationComparison:
    pairs: List[Tuple[RDRecord, RDRecord]]
    result: ComparisonResult

    COLUMNS = ("image", "r_max", "ppo_bits", "ppo_utility", "uniform_method", "uniform_bits", "uniform_utility")

    def summary(self) -> str:
        r = self.result
        return f"sign test: wins {r.wins} losses {r.losses} ties {r.ties} p_value {r.p_value:.6g}"

    def to_csv(self, header_lines: Sequence[str] = ()) -> str:
        rows = [[ppo.image_id, f"{ppo.r_max:.0f}", ppo.bits, f"{ppo.report.utility:.9g}", uniform.method,
                 uniform.bits, f"{uniform.report.utility:.9g}"] for ppo, uniform in self.pairs]
        return render_csv(self.COLUMNS, rows, list(header_lines) + [self.summary()])


def compare_on_images(images: Sequence[Tuple[str, ImagePlane]], bundle: CodecBundle, config: RunConfig,
                      nets: Optional[AllocatorNets] = None) -> AllocationComparison:
    """Adapted allocation against the finest fitting uniform level, each image at its configured budget"""
    pairs = []
    shared = nets
    for name, image in images:
        budget = config.resolve_r_max(image.pixels)
        if shared is None or config.ppo.reset_per_image:
            shared = create_allocator(bundle, config)
        try:
            ppo = score_image(name, image, bundle, config, "ppo", budget, nets=shared)
        except InfeasibleBudgetError as exc:
            logger.warning("%s skipped: %s", name, exc)
            continue
        pairs.append((ppo, score_image(name, image, bundle, config, "uniform", budget)))
    if not pairs:
        raise DataError("no image fits the configured budget")
    result = compare_allocation([p.report.utility for p, _ in pairs], [u.report.utility for _, u in pairs])
    return AllocationComparison(pairs, result)


# Commands

def _load_allocator(bundle: CodecBundle, config: RunConfig) -> AllocatorNets:
    nets = create_allocator(bundle, config)
    path = config.paths.policy_checkpoint
    if path and Path(path).exists():
        state, _ = load_checkpoint(path)
        try:
            nets.load_state_dict(state)
        except (KeyError, ValueError, NumericsError) as exc:
            raise ModelMismatchError(f"{path}: policy checkpoint does not fit ({exc})") from exc
        logger.info("warm-started allocator from %s", path)
    return nets


def cmd_train(config: RunConfig, train_dir: Optional[Union[str, Path]] = None) -> Path:
    images = load_images(train_dir or config.paths.train_dir)
    rows: List[Dict[str, float]] = []
    bundle = train_models(images, config, log_rows=rows)
    checkpoint = bundle.save(config.paths.checkpoint, config)
    log_path = Path(config.paths.output_dir) / "train_log.csv"
    table = [[r["step"], f"{r['rate_loss']:.9g}", f"{r['distortion_loss']:.9g}"] for r in rows]
    atomic_write_text(log_path, render_csv(("step", "rate_loss", "distortion_loss"), table,
                                           provenance_lines(config)))
    logger.info("wrote %s and %s", checkpoint, log_path)
    return checkpoint


def cmd_compress(config: RunConfig, image_path: Union[str, Path], output: Union[str, Path],
                 mode: Optional[str] = None) -> CompressionResult:
    bundle, _ = CodecBundle.load(config.paths.checkpoint)
    image = load_image(image_path)
    image.metadata["source"] = str(image_path)
    r_max = config.resolve_r_max(image.pixels)
    mode = mode or config.run.mode
    nets = _load_allocator(bundle, config) if mode == "ppo" else None
    provenance = provenance_lines(config, [config.paths.checkpoint])
    output = Path(output)
    report_path = output.with_name(output.name + ".report.csv") if mode == "ppo" else None
    result = compress_image(image, bundle, config, mode, r_max, nets=nets,
                            report_path=report_path, report_header=provenance)
    atomic_write_bytes(output, result.bitstream.data)
    if nets is not None and config.paths.policy_checkpoint:
        save_checkpoint(config.paths.policy_checkpoint, nets.state_dict(), metadata=config.to_text())
    write_manifest(output, {
        "image": str(image_path),
        "mode": result.mode,
        "r_tot": result.r_tot,
        "r_max": r_max,
        "actions": [int(a) for a in result.actions],
        "checkpoints": {str(config.paths.checkpoint): file_hash(config.paths.checkpoint)},
        "config": config.to_text(),
    })
    logger.info("%s: %d bits (budget %.0f, %.4f bpp) -> %s", image_path, result.r_tot, r_max,
                result.r_tot / image.pixels, output)
    return result


def cmd_decompress(config: RunConfig, bitstream_path: Union[str, Path], output: Union[str, Path],
                   seed: Optional[int] = None) -> Path:
    bundle, _ = CodecBundle.load(config.paths.checkpoint)
    try:
        data = Path(bitstream_path).read_bytes()
    except OSError as exc:
        raise DataError(f"{bitstream_path}: cannot read bitstream ({exc})") from exc
    image = decompress_bytes(data, bundle, config, seed)
    output = save_image(image, output)
    write_manifest(output, {
        "bitstream": str(bitstream_path),
        "seed": config.seed if seed is None else seed,
        "clamp_fraction": image.metadata.get("clamp_fraction", 0.0),
        "checkpoints": {str(config.paths.checkpoint): file_hash(config.paths.checkpoint)},
        "config": config.to_text(),
    })
    return output


def cmd_evaluate(config: RunConfig, originals: Union[str, Path], reconstructions: Union[str, Path],
                 output: Union[str, Path]) -> EvaluationResult:
    result = evaluate_directories(originals, reconstructions, config)
    atomic_write_text(output, result.to_csv(provenance_lines(config)))
    return result


def cmd_rd_sweep(config: RunConfig, image_dir: Union[str, Path], budgets: Sequence[float],
                 output: Union[str, Path], modes: Sequence[str] = ("ppo", "uniform")) -> List[RDRecord]:
    bundle, _ = CodecBundle.load(config.paths.checkpoint)
    images = [(p.stem, load_image(p)) for p in list_images(image_dir)]
    if not images:
        raise DataError(f"{image_dir}: no images found")
    nets = _load_allocator(bundle, config) if "ppo" in modes else None
    records = rd_sweep(images, bundle, config, budgets, modes, nets=nets)
    atomic_write_text(output, render_csv(RDRecord.COLUMNS, [r.to_row() for r in records],
                                         provenance_lines(config, [config.paths.checkpoint])))
    return records


def cmd_compare(config: RunConfig, image_dir: Union[str, Path], output: Union[str, Path]) -> AllocationComparison:
    bundle, _ = CodecBundle.load(config.paths.checkpoint)
    images = [(p.stem, load_image(p)) for p in list_images(image_dir)]
    if not images:
        raise DataError(f"{image_dir}: no images found")
    comparison = compare_on_images(images, bundle, config, nets=_load_allocator(bundle, config))
    atomic_write_text(output, comparison.to_csv(provenance_lines(config, [config.paths.checkpoint])))
    logger.info("%d images: mean utility ppo %.5f, uniform %.5f; %s", len(comparison.pairs),
                comparison.result.mean_ppo, comparison.result.mean_uniform, comparison.summary())
    return comparison


def cmd_make_data(output_dir: Union[str, Path], count: int, size: int = 64, seed: int = 0) -> List[Path]:
    return write_dataset(output_dir, count, size=size, seed=seed)
