"""Round-synchronous federated training with clipping and two-sided noise.

Each round: every participating client trains locally from its received
model, clips the flattened parameter vector to an L2 bound, adds Gaussian
noise, and submits; the server takes the p_i-weighted mean and sends every
client its own independently-noised copy of the new global. From the CRN
start round onward, the adversary additionally distills its received copy
into cross-round noise without touching the training process.
"""

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .crn import CrnConfig, CrnState, crn_update, zeros_state
from .datasets import Dataset, Partition
from .model import (
    Architecture,
    ModelParams,
    clone_params,
    flatten_params,
    param_count,
    predict,
    save_checkpoint,
    train_epochs,
    unflatten_params,
)
from .rng import derive_rng

__all__ = [
    "FedConfig",
    "FedState",
    "RoundLogRow",
    "clip_params",
    "add_gaussian_noise",
    "aggregate",
    "crn_start_round",
    "run_federation",
    "write_round_log",
    "params_digest",
]

log = logging.getLogger(__name__)


@dataclass
class FedConfig:
    clients: int = 3
    rounds: int = 15
    local_epochs: int = 2
    lr: float = 0.05
    batch: int = 32
    clip_bound: float | None = None
    # Nonzero noise defaults give each client a genuinely different model,
    # which is what makes transfer metrics informative.
    client_noise_sd: float = 0.005
    server_noise_sd: float = 0.02
    adversary_id: int | None = None
    beta: int | None = None
    sample_fraction: float = 1.0
    seed: int = 0
    # Named DP inputs are accepted for interface compatibility but no
    # calibration formula exists; noise is set via *_noise_sd directly.
    dp_epsilon: float | None = None
    dp_delta: float | None = None
    dp_mu: float | None = None

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ValueError("clip_bound must be > 0 when set")
        if self.client_noise_sd < 0 or self.server_noise_sd < 0:
            raise ValueError("noise sd must be >= 0")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.adversary_id is not None and not 0 <= self.adversary_id < self.clients:
            raise ValueError(f"adversary_id {self.adversary_id} out of range")
        if self.beta is not None and not 1 <= self.beta <= self.rounds:
            raise ValueError(f"beta must be in [1, {self.rounds}]")
        if any(v is not None for v in (self.dp_epsilon, self.dp_delta, self.dp_mu)):
            log.warning("dp_epsilon/dp_delta/dp_mu are accepted but ignored: no "
                        "noise calibration is defined; set client_noise_sd / "
                        "server_noise_sd directly")


@dataclass
class RoundLogRow:
    round: int
    client: int
    train_loss: float
    test_acc: float
    grad_norm: float


@dataclass
class FedState:
    round: int
    global_params: ModelParams
    client_params: list[ModelParams]  # per-client received (noisy) globals
    weights: np.ndarray
    crn: dict[int, CrnState] | None
    round_log: list[RoundLogRow] = field(default_factory=list)
    global_digests: list[str] = field(default_factory=list)


def params_digest(params: ModelParams) -> str:
    return hashlib.sha256(flatten_params(params).tobytes()).hexdigest()


def clip_params(w: ModelParams, c: float) -> ModelParams:
    """Scale w to L2 norm at most c: w / max(1, ||w|| / c)."""
    if c <= 0:
        raise ValueError("clip bound must be > 0")
    flat = flatten_params(w)
    norm = float(np.linalg.norm(flat))
    if norm <= c:
        return clone_params(w)
    return unflatten_params(flat / (norm / c), w)


def add_gaussian_noise(w: ModelParams, sd: float, rng: np.random.Generator) -> ModelParams:
    """Add i.i.d. N(0, sd^2) to every parameter; sd=0 is the exact identity."""
    if sd < 0:
        raise ValueError("noise sd must be >= 0")
    if sd == 0.0:
        return clone_params(w)
    flat = flatten_params(w)
    return unflatten_params(flat + rng.normal(0.0, sd, size=flat.size), w)


def aggregate(models: list[ModelParams], p) -> ModelParams:
    """Elementwise weighted mean sum_i p_i * w_i (weights must sum to 1)."""
    p = np.asarray(p, dtype=np.float64)
    if len(models) == 0 or len(models) != len(p):
        raise ValueError("need one weight per model")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {p.sum()!r}, expected 1")
    base = models[0]
    for m in models[1:]:
        if len(m.layers) != len(base.layers):
            raise ValueError("models have different layer counts")
        for la, lb in zip(m.layers, base.layers):
            if sorted(la) != sorted(lb) or any(la[k].shape != lb[k].shape for k in la):
                raise ValueError("models have mismatched layer shapes")
    acc = np.zeros(param_count(base))
    for w_i, m in zip(p, models):
        acc += w_i * flatten_params(m)
    return unflatten_params(acc, base)


def crn_start_round(rounds: int, window: int, beta: int | None = None) -> int:
    """First round at which a window-sized CRN accumulator runs."""
    derived = max(1, rounds - window + 1)
    if beta is None:
        return derived
    if beta != derived:
        log.warning("explicit beta=%d overrides window-derived start round %d",
                    beta, derived)
    return beta


def run_federation(cfg: FedConfig, arch: Architecture, train_set: Dataset,
                   partition: Partition, eval_set: Dataset | None = None,
                   attack_test: Dataset | None = None,
                   crn_configs: tuple[CrnConfig, ...] = (),
                   round_checkpoint_dir=None) -> FedState:
    """Run cfg.rounds federated rounds and return the final state.

    The round log records, per client per round, the mean local training
    loss, the accuracy of the client's trained (pre-noise) model on eval_set
    (its own shard when eval_set is None), and the last minibatch gradient
    norm. CRN accumulators (one per config in crn_configs) are updated from
    the adversary's received copy once their start round is reached; they
    never feed anything back into training.
    """
    if partition.clients != cfg.clients:
        raise ValueError(f"partition has {partition.clients} clients, config says {cfg.clients}")
    if crn_configs and cfg.adversary_id is None:
        raise ValueError("CRN accumulation requires an adversary_id")
    if crn_configs and attack_test is None:
        raise ValueError("CRN accumulation requires the fixed attack test set")
    for c in crn_configs:
        if c.window > cfg.rounds:
            raise ValueError(f"CRN window {c.window} exceeds {cfg.rounds} rounds")

    shards = [train_set.subset(idx) for idx in partition.client_indices]
    global_params = init_global(cfg, arch)
    received = [clone_params(global_params) for _ in range(cfg.clients)]
    # One shuffle/dropout stream per client, advanced across rounds. All
    # copies start identical so symmetric clients behave identically and a
    # federation of one replays centralized training bit-exactly.
    train_rngs = [derive_rng(cfg.seed, "local-train") for _ in range(cfg.clients)]
    crn_states: dict[int, CrnState] = {}
    starts: dict[int, int] = {}
    if crn_configs:
        for c in crn_configs:
            if c.window in crn_states:
                raise ValueError(f"duplicate CRN window {c.window}")
            crn_states[c.window] = zeros_state(c, attack_test.images.shape)
            starts[c.window] = crn_start_round(cfg.rounds, c.window, cfg.beta)

    state = FedState(0, global_params, received, partition.weights.copy(),
                     crn_states or None)

    for t in range(1, cfg.rounds + 1):
        participants = _pick_participants(cfg, t)
        submitted = {}
        for i in participants:
            try:
                trained, stats = train_epochs(
                    arch, state.client_params[i], shards[i].images, shards[i].labels,
                    cfg.local_epochs, cfg.lr, cfg.batch, train_rngs[i])
            except Exception as exc:
                raise RuntimeError(f"client {i} diverged in round {t}: {exc}") from exc
            if cfg.clip_bound is not None:
                trained = clip_params(trained, cfg.clip_bound)
            noisy = add_gaussian_noise(trained, cfg.client_noise_sd,
                                       derive_rng(cfg.seed, "client-noise", i, t))
            submitted[i] = noisy
            probe = eval_set if eval_set is not None else shards[i]
            acc = float(np.mean(predict(arch, trained, probe.images) == probe.labels))
            state.round_log.append(RoundLogRow(t, i, stats.mean_loss, acc,
                                               stats.last_grad_norm))
        p = state.weights[participants]
        global_params = aggregate([submitted[i] for i in participants], p / p.sum())
        global_params.round_tag = t
        state.global_params = global_params
        state.global_digests.append(params_digest(global_params))
        for i in range(cfg.clients):
            rec = add_gaussian_noise(global_params, cfg.server_noise_sd,
                                     derive_rng(cfg.seed, "server-noise", i, t))
            rec.round_tag = t
            state.client_params[i] = rec
        if crn_states:
            adv_model = state.client_params[cfg.adversary_id]
            for c in crn_configs:
                if t >= starts[c.window]:
                    crn_update(crn_states[c.window], arch, adv_model,
                               attack_test.images, c)
        if round_checkpoint_dir is not None:
            save_checkpoint(f"{round_checkpoint_dir}/global_round{t:04d}.fadv",
                            global_params)
        state.round = t
    return state


def init_global(cfg: FedConfig, arch: Architecture) -> ModelParams:
    """Initial global parameters w(0), derived only from the seed."""
    from .model import init_params

    return init_params(arch, derive_rng(cfg.seed, "init"))


def _pick_participants(cfg: FedConfig, t: int) -> np.ndarray:
    if cfg.sample_fraction >= 1.0:
        return np.arange(cfg.clients)
    m = max(1, int(np.ceil(cfg.sample_fraction * cfg.clients)))
    rng = derive_rng(cfg.seed, "subsample", t)
    return np.sort(rng.choice(cfg.clients, size=m, replace=False))


def write_round_log(state: FedState, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "client", "train_loss", "test_acc", "grad_norm"])
        for row in state.round_log:
            writer.writerow([row.round, row.client, repr(row.train_loss),
                             repr(row.test_acc), repr(row.grad_norm)])
