"""Cross-round noise: perturbations distilled from the received global model.

Over the last `window` federated rounds the adversary, using only models it
legitimately receives, runs a few ascent steps per round on a fixed test
batch: the loss is the cross-entropy of the current model's predictions on
x + delta against the model's own clean predictions on x (re-derived each
round), the gradient is centered per (sample, channel), and delta stays
inside the L-infinity eps-ball. The accumulated delta then seeds standard
input attacks in place of zero or random starts.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .model import Architecture, ModelParams, loss_and_input_grad, predict
from .tensor_ops import channel_mean_center, project_linf, sign

__all__ = [
    "CrnConfig",
    "CrnState",
    "CrnUninitializedError",
    "zeros_state",
    "crn_update",
    "crn_as_init",
    "crn_init_full",
    "save_crn",
    "load_crn",
]

_MAGIC = b"CRN1"


class CrnUninitializedError(RuntimeError):
    """Raised when CRN noise is requested before any round has been applied."""


@dataclass(frozen=True)
class CrnConfig:
    eps: float = 0.05
    window: int = 10
    inner_steps: int = 2  # mirrors the federation's default local epochs
    step_size: float = 0.01
    mode: str = "accumulate"

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.mode not in ("accumulate", "literal"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class CrnState:
    delta: np.ndarray
    eps: float
    window: int
    rounds_applied: int = 0
    # Inner-loop loss trajectory, one list per applied round.
    history: list[list[float]] = field(default_factory=list)
    # Largest per-(sample, channel) mean magnitude seen after centering.
    center_residual_max: float = 0.0


def zeros_state(cfg: CrnConfig, x_shape) -> CrnState:
    if len(x_shape) != 4:
        raise ValueError(f"expected NCHW test-batch shape, got {tuple(x_shape)}")
    return CrnState(np.zeros(x_shape), cfg.eps, cfg.window)


def crn_update(state: CrnState, arch: Architecture, params: ModelParams,
               x_test: np.ndarray, cfg: CrnConfig) -> CrnState:
    """Apply one round of accumulation; reads params/x_test, mutates state."""
    if state.delta.shape != x_test.shape:
        raise ValueError(f"state built for {state.delta.shape}, got {x_test.shape}")
    if cfg.eps != state.eps or cfg.window != state.window:
        raise ValueError("config does not match the one this state was built with")
    # The model's own clean predictions anchor the round: ascent pushes the
    # perturbed outputs away from what the received model currently believes.
    pseudo = predict(arch, params, x_test)
    delta = state.delta
    losses = []
    for _ in range(cfg.inner_steps):
        loss, grad = loss_and_input_grad(arch, params, x_test + delta, pseudo)
        centered = channel_mean_center(grad)
        residual = float(np.max(np.abs(centered.mean(axis=(2, 3)))))
        state.center_residual_max = max(state.center_residual_max, residual)
        if cfg.mode == "literal":
            delta = project_linf(centered, cfg.eps)
        else:
            delta = project_linf(delta + cfg.step_size * sign(centered), cfg.eps)
        losses.append(loss)
    state.delta = delta
    state.rounds_applied += 1
    state.history.append(losses)
    return state


def crn_init_full(state: CrnState) -> np.ndarray:
    """The full accumulated perturbation, for seeding a batch attack."""
    if state.rounds_applied == 0:
        raise CrnUninitializedError("no CRN rounds applied yet")
    return state.delta.copy()


def crn_as_init(state: CrnState, sample_index: int) -> np.ndarray:
    """One sample's accumulated perturbation (CHW)."""
    full = crn_init_full(state)
    if not 0 <= sample_index < full.shape[0]:
        raise IndexError(f"sample index {sample_index} out of range")
    return full[sample_index]


def save_crn(path, state: CrnState) -> None:
    d = np.ascontiguousarray(state.delta, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<dII", state.eps, state.window, state.rounds_applied))
        f.write(struct.pack("<I", d.ndim))
        f.write(struct.pack(f"<{d.ndim}I", *d.shape))
        f.write(d.astype("<f8").tobytes())


def load_crn(path) -> CrnState:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"bad magic {raw[:4]!r}")
    eps, window, rounds_applied = struct.unpack_from("<dII", raw, 4)
    (rank,) = struct.unpack_from("<I", raw, 20)
    shape = struct.unpack_from(f"<{rank}I", raw, 24)
    off = 24 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != off + 8 * count:
        raise ValueError("truncated or oversized CRN file")
    delta = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
    state = CrnState(delta.astype(np.float64), float(eps), int(window),
                     rounds_applied=int(rounds_applied))
    if np.any(np.abs(state.delta) > state.eps + 1e-9):
        raise ValueError("stored noise exceeds its own eps bound")
    return state
