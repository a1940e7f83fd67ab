"""Input-space evasion attacks: FGSM, BIM, and PGD over a shared engine.

All three run the same loop: start from an initial perturbation (zero,
uniform random in the eps-ball, or accumulated cross-round noise), then for
each iteration take a signed gradient step on the true-label loss, clip the
total perturbation to the L-infinity eps-ball, and clamp pixels back to
range. FGSM is the single-iteration case with step size eps, so its
zero-init form is exactly one signed step; BIM is the iterative case from a
zero start; PGD by default starts from a random point in the ball.
"""

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .crn import CrnState, crn_init_full
from .datasets import Dataset, save_fds1
from .model import Architecture, ModelParams, loss_and_input_grad
from .rng import derive_rng
from .tensor_ops import clamp, project_linf, sign

__all__ = [
    "AttackConfig",
    "AdversarialBatch",
    "craft",
    "fgsm",
    "bim",
    "pgd",
    "attack_with_timing",
    "save_adversarial_pair",
]

log = logging.getLogger(__name__)

_METHODS = ("fgsm", "bim", "pgd")
_INITS = ("zero", "random_uniform", "crn")
_DEFAULT_INIT = {"fgsm": "zero", "bim": "zero", "pgd": "random_uniform"}


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    eps: float = 0.05
    alpha: float = 0.01
    iters: int = 40
    init: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.method == "fgsm" and self.iters != 1:
            object.__setattr__(self, "iters", 1)  # single-step by definition
        if self.init is None:
            object.__setattr__(self, "init", _DEFAULT_INIT[self.method])
        if self.init not in _INITS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.method != "fgsm" and self.alpha > self.eps:
            log.warning("step size %g exceeds eps %g; every iterate lands on "
                        "the ball surface", self.alpha, self.eps)

    @property
    def step_size(self) -> float:
        return self.eps if self.method == "fgsm" else self.alpha


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    x_clean: np.ndarray
    labels: np.ndarray
    config: AttackConfig
    seconds: float
    model_round: int

    def __post_init__(self):
        if self.x_adv.shape != self.x_clean.shape:
            raise ValueError("clean/adversarial shape mismatch")
        worst = float(np.max(np.abs(self.x_adv - self.x_clean))) if self.x_adv.size else 0.0
        if worst > self.config.eps + 1e-9:
            raise ValueError(f"perturbation {worst} exceeds eps {self.config.eps}")
        if self.x_adv.size and (self.x_adv.min() < 0.0 or self.x_adv.max() > 1.0):
            raise ValueError("adversarial pixels left [0, 1]")

    @property
    def perturbation(self) -> np.ndarray:
        return self.x_adv - self.x_clean


def _initial_perturbation(cfg: AttackConfig, x: np.ndarray,
                          crn_state: CrnState | None) -> np.ndarray:
    if cfg.init == "zero":
        return np.zeros_like(x)
    if cfg.init == "random_uniform":
        rng = derive_rng(cfg.seed, "attack-init")
        return rng.uniform(-cfg.eps, cfg.eps, size=x.shape)
    if crn_state is None:
        raise ValueError("init='crn' needs a CrnState")
    noise = crn_init_full(crn_state)
    if noise.shape != x.shape:
        raise ValueError(f"CRN noise shape {noise.shape} does not match batch "
                         f"{x.shape}; it must target the same fixed test set")
    # The accumulator may have used a wider ball than this attack.
    return project_linf(noise, cfg.eps)


def craft(arch: Architecture, params: ModelParams, x: np.ndarray, y: np.ndarray,
          cfg: AttackConfig, crn_state: CrnState | None = None) -> AdversarialBatch:
    """Craft untargeted adversarial examples for the batch (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 4:
        raise ValueError(f"expected NCHW batch, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError("need one true label per sample")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("clean pixels must lie in [0, 1]")
    t0 = time.perf_counter()
    x_adv = clamp(x + _initial_perturbation(cfg, x, crn_state), 0.0, 1.0)
    for _ in range(cfg.iters):
        _, grad = loss_and_input_grad(arch, params, x_adv, y)
        x_adv = x_adv + cfg.step_size * sign(grad)
        x_adv = x + project_linf(x_adv - x, cfg.eps)
        x_adv = clamp(x_adv, 0.0, 1.0)
    seconds = time.perf_counter() - t0
    return AdversarialBatch(x_adv, x.copy(), y.copy(), cfg, seconds,
                            params.round_tag)


def fgsm(arch, params, x, y, cfg: AttackConfig, crn_state=None) -> AdversarialBatch:
    return craft(arch, params, x, y, replace(cfg, method="fgsm", iters=1), crn_state)


def bim(arch, params, x, y, cfg: AttackConfig) -> AdversarialBatch:
    return craft(arch, params, x, y, replace(cfg, method="bim", init="zero"))


def pgd(arch, params, x, y, cfg: AttackConfig, crn_state=None) -> AdversarialBatch:
    return craft(arch, params, x, y, replace(cfg, method="pgd"), crn_state)


def attack_with_timing(arch, params, x, y, cfg: AttackConfig,
                       crn_state=None) -> tuple[AdversarialBatch, float]:
    batch = craft(arch, params, x, y, cfg, crn_state)
    return batch, batch.seconds


def save_adversarial_pair(prefix, batch: AdversarialBatch, class_count: int) -> None:
    """Write <prefix>_clean.fds1 and <prefix>_adv.fds1 side by side."""
    labels = batch.labels.astype(np.int64)
    save_fds1(f"{prefix}_clean.fds1",
              Dataset(batch.x_clean, labels, class_count, name="clean"))
    save_fds1(f"{prefix}_adv.fds1",
              Dataset(batch.x_adv, labels, class_count, name="adversarial"))
