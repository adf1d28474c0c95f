"""
Constrained block-wise bit allocation with a masked PPO policy

An episode walks the blocks of one image in raster order. At every block
the policy picks a quantization level among the levels that still leave
room for the remaining blocks at the coarsest level; the episode ends with
a single Lagrangian reward (utility minus the multiplier times the budget
overshoot). Policy and value networks are updated with the clipped
surrogate, and the multiplier by projected dual ascent once per epoch.
"""

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Union

import numpy as np

from .codec import (Bitstream, EncoderNet, StepLadder, base_bits, block_cost_table, encode_latent,
                    quantize, serialize)
from .diffusion import DenoiserNet, SamplerConfig, VarianceSchedule, reconstruct
from .entropy import EntropyModel
from .errors import NumericsError
from .fsutil import atomic_write_text
from .imaging import ImagePlane, grid_stats, highpass, partition
from .layers import MLP, Module
from .metrics import MetricReport, MetricWeights, evaluate
from .numerics import (Adam, Tensor, clip, exp, gradients, log, minimum, mse, no_grad, softmax,
                       tensor_sum)

logger = logging.getLogger(__name__)

MASK_PENALTY = 1e9
LOG_FLOOR = 1e-12
RESIDUAL_FEATURES = 4


def state_dim(latent_channels: int = 8) -> int:
    return RESIDUAL_FEATURES + 2 * latent_channels + 1 + 2


@dataclass
class PPOConfig:
    clip: float = 0.2
    entropy_weight: float = 0.01
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    dual_step: float = 1e-3
    epochs: int = 8
    episodes: int = 4
    update_iterations: int = 4
    hidden: int = 64
    normalize_advantages: bool = False
    entropy_anneal: bool = False
    action_masking: bool = True
    greedy_final: bool = True
    rollout_workers: int = 1
    reset_per_image: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be non-negative")
        if self.epochs < 0 or self.episodes < 1 or self.update_iterations < 1:
            raise ValueError("epochs >= 0, episodes >= 1 and update_iterations >= 1 required")


@dataclass
class DualController:
    """Lagrange multiplier for the bit budget"""
    r_max: float
    eta: float = 0.0
    step: float = 1e-3

    def __post_init__(self):
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


def dual_update(dual: DualController, r_tot: Union[float, Sequence[float]]) -> float:
    """Projected ascent on the multiplier using the mean of the given totals"""
    mean_total = float(np.mean(r_tot))
    dual.eta = max(0.0, dual.eta + dual.step * (mean_total - dual.r_max))
    return dual.eta


@dataclass
class AllocationState:
    residual_stats: np.ndarray
    latent_stats: np.ndarray
    remaining: float
    coordinates: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.residual_stats, self.latent_stats, [self.remaining], self.coordinates])


def latent_block_stats(z: np.ndarray, row: int, col: int, footprint: int) -> np.ndarray:
    """Per-channel means followed by per-channel stds over one block's latent tile"""
    tile = z[:, row * footprint:(row + 1) * footprint, col * footprint:(col + 1) * footprint]
    flat = tile.reshape(z.shape[0], -1)
    return np.concatenate([flat.mean(axis=1), flat.std(axis=1)])


def build_state(residual_stats: np.ndarray, latent_stats: np.ndarray, bits_committed: float,
                r_max: float, coordinates: Sequence[float]) -> AllocationState:
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    return AllocationState(
        residual_stats=np.asarray(residual_stats, dtype=np.float64),
        latent_stats=np.asarray(latent_stats, dtype=np.float64),
        remaining=max(0.0, (r_max - bits_committed) / r_max),
        coordinates=np.asarray(coordinates, dtype=np.float64),
    )


def projected_costs(block_costs: np.ndarray, index: int) -> np.ndarray:
    """Cost of each level at ``index`` plus every later block at the coarsest level"""
    return block_costs[index] + block_costs[index + 1:, 0].sum()


def mask_actions(remaining: float, costs: Sequence[float]) -> np.ndarray:
    mask = np.asarray(costs, dtype=np.float64) <= remaining
    mask[0] = True
    return mask


# Networks

class PolicyNet(Module):
    def __init__(self, rng: np.random.Generator, input_dim: int, num_actions: int, hidden: int = 64):
        self.mlp = MLP([input_dim, hidden, hidden, num_actions], rng, final_scale=0.01)

    def forward(self, states: Tensor) -> Tensor:
        return self.mlp(states)


class ValueNet(Module):
    def __init__(self, rng: np.random.Generator, input_dim: int, hidden: int = 64):
        self.mlp = MLP([input_dim, hidden, hidden, 1], rng)

    def forward(self, states: Tensor) -> Tensor:
        out = self.mlp(states)
        return out.reshape(out.shape[0])


def masked_probs(policy: PolicyNet, states: Union[np.ndarray, Tensor], masks: np.ndarray) -> Tensor:
    states = states if isinstance(states, Tensor) else Tensor(np.atleast_2d(states))
    bias = (np.atleast_2d(masks).astype(np.float64) - 1.0) * MASK_PENALTY
    return softmax(policy(states) + Tensor(bias))


def masked_entropy(probs: Tensor, masks: np.ndarray) -> Tensor:
    """Mean entropy of the masked distributions; infeasible entries contribute 0"""
    masks = np.atleast_2d(masks).astype(np.float64)
    logs = log(probs + Tensor(1.0 - masks + LOG_FLOOR))
    return (-tensor_sum(probs * logs, axis=1)).mean()


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, clip_range: float) -> Tensor:
    """Per-sample min(ratio * A, clip(ratio) * A)"""
    adv = Tensor(advantages)
    return minimum(ratio * adv, clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv)


@dataclass
class AllocatorNets:
    """Policy and value networks with their optimizers"""
    policy: PolicyNet
    value: ValueNet
    policy_opt: Adam
    value_opt: Adam

    @classmethod
    def create(cls, input_dim: int, num_actions: int, config: PPOConfig, seed: int = 0) -> "AllocatorNets":
        rng = np.random.default_rng(seed)
        policy = PolicyNet(rng, input_dim, num_actions, config.hidden)
        value = ValueNet(rng, input_dim, config.hidden)
        return cls(policy, value, Adam(policy.parameters(), config.actor_lr),
                   Adam(value.parameters(), config.critic_lr))

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"policy.{k}": v for k, v in self.policy.state_dict().items()}
        state.update({f"value.{k}": v for k, v in self.value.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.policy.load_state_dict({k[7:]: v for k, v in state.items() if k.startswith("policy.")})
        self.value.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("value.")})


# Environments

@dataclass
class Outcome:
    utility: float
    r_tot: float
    bitstream: Optional[Bitstream] = None
    reconstruction: Optional[ImagePlane] = None
    report: Optional[MetricReport] = None


class AllocationEnvironment(Protocol):
    num_blocks: int
    num_actions: int
    r_max: float
    base_bits: float

    def block_costs(self) -> np.ndarray: ...

    def features(self) -> np.ndarray: ...

    def coordinates(self) -> np.ndarray: ...

    def evaluate(self, actions: Sequence[int]) -> Outcome: ...


class SyntheticEnvironment:
    """Additive per-block utilities and costs; no coding or decoding"""

    def __init__(self, costs: np.ndarray, utilities: np.ndarray, r_max: float, base: float = 0.0,
                 features: Optional[np.ndarray] = None, grid_shape: Optional[tuple] = None):
        self.costs = np.asarray(costs, dtype=np.float64)
        self.utilities = np.asarray(utilities, dtype=np.float64)
        if self.costs.shape != self.utilities.shape or self.costs.ndim != 2:
            raise ValueError("costs and utilities must both be (blocks, actions)")
        self.num_blocks, self.num_actions = self.costs.shape
        self.r_max = float(r_max)
        self.base_bits = float(base)
        if features is None:
            width = state_dim() - 3
            features = np.zeros((self.num_blocks, width))
            k = self.num_actions
            features[:, :k] = self.utilities
            features[:, k:2 * k] = self.costs / max(self.costs.max(), 1e-12)
        self._features = np.asarray(features, dtype=np.float64)
        self.grid_shape = grid_shape or (1, self.num_blocks)

    def block_costs(self) -> np.ndarray:
        return self.costs

    def features(self) -> np.ndarray:
        return self._features

    def coordinates(self) -> np.ndarray:
        rows, cols = self.grid_shape
        index = np.arange(self.num_blocks)
        r, c = index // cols, index % cols
        return np.stack([r / max(rows - 1, 1), c / max(cols - 1, 1)], axis=1)

    def evaluate(self, actions: Sequence[int]) -> Outcome:
        picks = np.asarray(actions, dtype=np.int64)
        rows = np.arange(self.num_blocks)
        return Outcome(utility=float(self.utilities[rows, picks].sum()),
                       r_tot=self.base_bits + float(self.costs[rows, picks].sum()))


class CodecEnvironment:
    """One image against trained codec parts; evaluation encodes and decodes for real"""

    def __init__(self, image: ImagePlane, encoder: EncoderNet, model: EntropyModel,
                 denoiser: Union[DenoiserNet, Any], schedule: VarianceSchedule, r_max: float,
                 ladder: StepLadder = StepLadder(), block_size: int = 16,
                 sampler: SamplerConfig = SamplerConfig(), weights: MetricWeights = MetricWeights(),
                 perceptual: Sequence[str] = ("lpips-proxy", "dists-proxy")):
        self.image = image
        self.model = model.quantized()
        self.denoiser = denoiser
        self.schedule = schedule
        self.ladder = ladder
        self.block_size = block_size
        self.sampler = sampler
        self.weights = weights
        self.perceptual = tuple(perceptual)
        self.r_max = float(r_max)

        self.grid = partition(image, block_size)
        self.footprint = block_size // 4
        self.z = encode_latent(self.grid.padded, encoder)
        self.num_blocks = self.grid.count
        self.num_actions = len(ladder)
        self.base_bits = float(base_bits(self.z.shape[0], self.num_blocks))
        self._costs = block_cost_table(self.z, ladder, self.model, self.footprint)
        residual = grid_stats(highpass(self.grid.padded), self.grid)
        latent = np.stack([latent_block_stats(self.z, b.row, b.col, self.footprint) for b in self.grid.blocks])
        self._features = np.concatenate([residual, latent], axis=1)

    def block_costs(self) -> np.ndarray:
        return self._costs

    def features(self) -> np.ndarray:
        return self._features

    def coordinates(self) -> np.ndarray:
        return np.stack([self.grid.coordinates(b) for b in self.grid.blocks])

    def minimum_bits(self) -> float:
        """Upper bound on the coded size of the all-coarsest allocation"""
        return self.base_bits + float(self._costs[:, 0].sum())

    def encode(self, actions: Sequence[int]) -> Bitstream:
        latent = quantize(self.z, actions, self.ladder, self.footprint)
        return serialize(latent, (self.image.height, self.image.width), self.model,
                         self.block_size, self.num_actions)

    def evaluate(self, actions: Sequence[int]) -> Outcome:
        stream = self.encode(actions)
        latent = quantize(self.z, actions, self.ladder, self.footprint)
        recon = reconstruct(latent, (self.image.height, self.image.width), self.denoiser,
                            self.schedule, self.sampler, self.ladder)
        report = evaluate(self.image, recon, self.weights, self.perceptual)
        return Outcome(utility=report.utility, r_tot=float(stream.total_bits), bitstream=stream,
                       reconstruction=recon, report=report)


# Episodes

@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    masks: np.ndarray
    reward: float = 0.0
    returns: np.ndarray = field(default_factory=lambda: np.zeros(0))
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Episode:
    trajectory: Trajectory
    outcome: Outcome
    epoch: int = 0
    index: int = 0
    greedy: bool = False

    @property
    def actions(self) -> np.ndarray:
        return self.trajectory.actions

    def feasible(self, r_max: float) -> bool:
        return self.outcome.r_tot <= r_max


def _choose(probs: np.ndarray, mask: np.ndarray, rng: Optional[np.random.Generator]) -> int:
    if rng is None:
        return int(np.argmax(probs))
    choice = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    choice = min(choice, len(probs) - 1)
    if not mask[choice]:
        choice = int(np.flatnonzero(mask)[-1])
    return choice


def rollout(env: AllocationEnvironment, policy: PolicyNet, config: PPOConfig,
            rng: Optional[np.random.Generator] = None) -> Episode:
    """One raster-order pass over the blocks; ``rng=None`` picks greedily"""
    costs = env.block_costs()
    features = env.features()
    coords = env.coordinates()
    budget = env.r_max - env.base_bits
    reference = budget if budget > 0 else env.r_max
    committed = 0.0
    states, actions, log_probs, masks = [], [], [], []
    for b in range(env.num_blocks):
        state = build_state(features[b][:RESIDUAL_FEATURES], features[b][RESIDUAL_FEATURES:],
                            committed, reference, coords[b]).to_vector()
        if config.action_masking:
            mask = mask_actions(budget - committed, projected_costs(costs, b))
        else:
            mask = np.ones(env.num_actions, dtype=bool)
        with no_grad():
            probs = masked_probs(policy, state, mask).data[0]
        action = _choose(probs, mask, rng)
        states.append(state)
        actions.append(action)
        log_probs.append(float(np.log(probs[action] + LOG_FLOOR)))
        masks.append(mask)
        committed += costs[b, action]

    trajectory = Trajectory(states=np.asarray(states), actions=np.asarray(actions, dtype=np.int64),
                            log_probs=np.asarray(log_probs), masks=np.asarray(masks))
    return Episode(trajectory=trajectory, outcome=env.evaluate(trajectory.actions), greedy=rng is None)


def lagrangian_reward(utility_value: float, r_tot: float, dual: DualController) -> float:
    return utility_value - dual.eta * (r_tot - dual.r_max)


def compute_reward(x0: ImagePlane, reconstruction: ImagePlane, r_tot: float, dual: DualController,
                   weights: MetricWeights = MetricWeights()) -> float:
    return lagrangian_reward(evaluate(x0, reconstruction, weights).utility, r_tot, dual)


def advantages(trajectory: Trajectory, value: ValueNet, normalize: bool = False) -> np.ndarray:
    """Terminal return for every block minus the value baseline"""
    trajectory.returns = np.full(len(trajectory), trajectory.reward)
    with no_grad():
        baseline = value(Tensor(trajectory.states)).data
    adv = trajectory.returns - baseline
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    trajectory.advantages = adv
    return adv


@dataclass
class UpdateStats:
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    entropy: float = float("nan")
    aborted: bool = False


def ppo_update(trajectories: Sequence[Trajectory], nets: AllocatorNets, config: PPOConfig,
               entropy_weight: Optional[float] = None) -> UpdateStats:
    """Clipped-surrogate policy steps and value regression on collected trajectories

    Advantages must already be filled in; old log-probabilities stay fixed.
    ``entropy_weight`` overrides the configured bonus weight for this call.
    """
    kappa = config.entropy_weight if entropy_weight is None else entropy_weight
    states = np.concatenate([t.states for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    old_log_probs = np.concatenate([t.log_probs for t in trajectories])
    masks = np.concatenate([t.masks for t in trajectories])
    adv = np.concatenate([t.advantages for t in trajectories])
    returns = np.concatenate([t.returns for t in trajectories])
    onehot = np.eye(masks.shape[1])[actions]
    stats = UpdateStats()

    try:
        for _ in range(config.update_iterations):
            probs = masked_probs(nets.policy, states, masks)
            taken = tensor_sum(probs * Tensor(onehot), axis=1)
            ratio = exp(log(taken + LOG_FLOOR) - Tensor(old_log_probs))
            surrogate = clipped_surrogate(ratio, adv, config.clip).mean()
            entropy = masked_entropy(probs, masks)
            policy_loss = -(surrogate + kappa * entropy)
            value_loss = mse(nets.value(Tensor(states)), Tensor(returns))
            if not (np.isfinite(policy_loss.item()) and np.isfinite(value_loss.item())):
                raise NumericsError("ppo_update: non-finite loss")
            nets.policy_opt.step(gradients(policy_loss, nets.policy_opt.params))
            nets.value_opt.step(gradients(value_loss, nets.value_opt.params))
            stats = UpdateStats(policy_loss.item(), value_loss.item(), entropy.item())
    except NumericsError as exc:
        logger.warning("PPO update aborted: %s", exc)
        stats.aborted = True
    return stats


# Per-image adaptation

REPORT_COLUMNS = ("epoch", "episode", "utility", "r_tot", "eta", "feasible")


@dataclass
class AdaptationResult:
    best: Episode
    episodes: List[Episode]
    rows: List[Dict[str, Any]]
    eta_trace: List[float]
    update_stats: List[UpdateStats]

    def report_csv(self, header_lines: Sequence[str] = ()) -> str:
        buffer = io.StringIO()
        for line in header_lines:
            buffer.write(f"# {line}\n")
        writer = csv.DictWriter(buffer, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buffer.getvalue()


def select_best(episodes: Sequence[Episode], r_max: float) -> Episode:
    """Highest utility among feasible episodes, else the smallest total"""
    feasible = [e for e in episodes if e.feasible(r_max)]
    if feasible:
        return max(feasible, key=lambda e: e.outcome.utility)
    return min(episodes, key=lambda e: e.outcome.r_tot)


def entropy_weight_at(config: PPOConfig, epoch: int) -> float:
    """Entropy bonus for ``epoch``; with annealing it falls linearly to zero at the last epoch"""
    if not config.entropy_anneal or config.epochs <= 1:
        return config.entropy_weight
    return config.entropy_weight * (1.0 - epoch / (config.epochs - 1))


def _collect(env: AllocationEnvironment, nets: AllocatorNets, config: PPOConfig,
             seeds: Sequence[np.random.SeedSequence]) -> List[Episode]:
    def run(seq):
        return rollout(env, nets.policy, config, np.random.default_rng(seq))

    if config.rollout_workers > 1:
        with ThreadPoolExecutor(max_workers=config.rollout_workers) as pool:
            return list(pool.map(run, seeds))
    return [run(seq) for seq in seeds]


def adapt_per_image(env: AllocationEnvironment, nets: AllocatorNets, config: PPOConfig,
                    dual: DualController, seed: int = 0,
                    report_path: Optional[Union[str, Path]] = None,
                    report_header: Sequence[str] = ()) -> AdaptationResult:
    """Alternate rollouts, policy updates and dual ascent on a single image"""
    rows: List[Dict[str, Any]] = []
    eta_trace = [dual.eta]
    all_episodes: List[Episode] = []
    update_stats: List[UpdateStats] = []

    def record(episode: Episode, epoch: int, index: Union[int, str], eta: float):
        episode.epoch, episode.index = epoch, index if isinstance(index, int) else -1
        rows.append({
            "epoch": epoch,
            "episode": index,
            "utility": f"{episode.outcome.utility:.9g}",
            "r_tot": f"{episode.outcome.r_tot:.0f}",
            "eta": f"{eta:.9g}",
            "feasible": int(episode.feasible(dual.r_max)),
        })
        all_episodes.append(episode)

    for epoch in range(max(config.epochs, 1)):
        seeds = np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)).spawn(config.episodes)
        episodes = _collect(env, nets, config, seeds)
        eta = dual.eta
        for index, episode in enumerate(episodes):
            episode.trajectory.reward = lagrangian_reward(episode.outcome.utility, episode.outcome.r_tot, dual)
            advantages(episode.trajectory, nets.value, config.normalize_advantages)
            record(episode, epoch, index, eta)
            logger.debug("epoch %d episode %d U=%.5f R=%.0f", epoch, index,
                         episode.outcome.utility, episode.outcome.r_tot)
        if config.epochs == 0:
            break
        update_stats.append(ppo_update([e.trajectory for e in episodes], nets, config,
                                       entropy_weight=entropy_weight_at(config, epoch)))
        dual_update(dual, [e.outcome.r_tot for e in episodes])
        eta_trace.append(dual.eta)
        logger.info("epoch %d: mean U %.5f, mean R_tot %.1f, eta %.6f", epoch,
                    np.mean([e.outcome.utility for e in episodes]),
                    np.mean([e.outcome.r_tot for e in episodes]), dual.eta)

    if config.greedy_final and config.epochs > 0:
        greedy = rollout(env, nets.policy, config, rng=None)
        greedy.trajectory.reward = lagrangian_reward(greedy.outcome.utility, greedy.outcome.r_tot, dual)
        record(greedy, config.epochs, "greedy", dual.eta)

    result = AdaptationResult(best=select_best(all_episodes, dual.r_max), episodes=all_episodes,
                              rows=rows, eta_trace=eta_trace, update_stats=update_stats)
    if report_path is not None:
        atomic_write_text(report_path, result.report_csv(report_header))
    return result
