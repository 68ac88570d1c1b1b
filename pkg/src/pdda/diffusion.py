"""Noise schedule and the core diffusion-step algebra.

The network is an epsilon-predictor: given x_t and the step t it returns
eps_hat, the expected noise. All step formulas below are written in that
parameterization, with sigma_t the posterior noise scale (zero at t=1 so
the final step is deterministic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, mul, sub

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "make_schedule",
    "forward_diffuse",
    "estimate_x0",
    "reverse_step",
    "conditional_score",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step constants for a T-step diffusion.

    Arrays are indexed by t-1 for t in [1, T]; alpha_bar[t-1] is the
    cumulative product of alpha up to and including step t.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_sigma: np.ndarray

    def _check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")
        return t - 1

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check_t(t)])

    def alpha_at(self, t: int) -> float:
        return float(self.alpha[self._check_t(t)])

    def alpha_bar_at(self, t: int) -> float:
        return float(self.alpha_bar[self._check_t(t)])

    def sigma_at(self, t: int) -> float:
        return float(self.posterior_sigma[self._check_t(t)])


@dataclass
class GuidanceConfig:
    """All knobs of the guided sampler."""

    guidance_scale: float = 2.0          # R, magnitude of the conditional term
    tau: float = 0.5                     # contrastive temperature
    patch_size: int = 2                  # P, spatial patch edge
    s_fraction: float = 0.5              # guidance active for t <= floor(s_fraction * T)
    t_star: float = 0.008                # feature-encoding step as a fraction of T
    projection_mode: str = "always"      # always | on_conflict_only | off
    use_semantic_keeper: bool = True     # f1 on/off
    use_modification_keeper: bool = True  # f2 on/off
    grad_through_score: bool = True      # differentiate through the eps-prediction
    semantic_weight: float = 1.0         # per-keeper weights on the combined term
    modification_weight: float = 1.0

    _MODES = ("always", "on_conflict_only", "off")

    def __post_init__(self):
        if not 0.0 <= self.s_fraction <= 1.0:
            raise ValueError(f"s_fraction must lie in [0, 1], got {self.s_fraction}")
        if not 0.0 < self.t_star < 1.0:
            raise ValueError(f"t_star must lie in (0, 1), got {self.t_star}")
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.projection_mode not in self._MODES:
            raise ValueError(f"projection_mode must be one of {self._MODES}")


def make_schedule(T: int, kind: str = "cosine",
                  beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Build a T-step noise schedule.

    cosine: squared-cosine alpha_bar with the usual 0.008 offset, betas
    clipped to 0.999. linear: betas interpolate beta_start..beta_end.
    """
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "cosine":
        s = 0.008
        u = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((u + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, 0.999)
    elif kind == "linear":
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    sched = NoiseSchedule(T=T, beta=beta, alpha=alpha,
                          alpha_bar=alpha_bar, posterior_sigma=sigma)
    if np.any(np.diff(alpha_bar) >= 0.0) or alpha_bar[0] >= 1.0 or alpha_bar[-1] <= 0.0:
        raise ValueError("alpha_bar must be strictly decreasing inside (0, 1)")
    return sched


def forward_diffuse(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise a clean image to step t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    ab = sched.alpha_bar_at(t)
    if eps.data.shape != x0.data.shape:
        raise ValueError("eps must match x0's shape")
    return Tensor._make(
        np.sqrt(ab) * x0.data + np.sqrt(1.0 - ab) * eps.data, False)


def estimate_x0(x_t: Tensor, t: int, eps_hat: Tensor, sched: NoiseSchedule) -> Tensor:
    """One-step clean-image estimate (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t).

    Differentiable: gradients flow into both x_t and eps_hat.
    """
    ab = sched.alpha_bar_at(t)
    if ab == 0.0:
        raise ZeroDivisionError("alpha_bar is zero at this step")
    return mul(sub(x_t, mul(eps_hat, np.sqrt(1.0 - ab))), 1.0 / np.sqrt(ab))


def reverse_step(x_t: Tensor, t: int, eps_hat: Tensor,
                 sched: NoiseSchedule, z: Tensor) -> Tensor:
    """One ancestral step t -> t-1 with posterior noise sigma_t * z."""
    b = sched.beta_at(t)
    a = sched.alpha_at(t)
    ab = sched.alpha_bar_at(t)
    mean = (x_t.data - (b / np.sqrt(1.0 - ab)) * eps_hat.data) / np.sqrt(a)
    return Tensor._make(mean + sched.sigma_at(t) * z.data, False)


def conditional_score(f1, f2_projected, cfg: GuidanceConfig, like=None) -> np.ndarray:
    """Combine keeper directions into the additive conditional term.

    Returns -R * (w1 * f1 + w2 * f2_projected); a disabled keeper passes
    None and contributes zero. With both absent, returns zeros shaped like
    `like` (or like the present gradient).
    """
    ref = f1 if f1 is not None else f2_projected
    if ref is None:
        if like is None:
            raise ValueError("need a reference shape when both keepers are absent")
        return np.zeros_like(np.asarray(like, dtype=np.float64))
    total = np.zeros_like(ref)
    if f1 is not None:
        total += cfg.semantic_weight * f1
    if f2_projected is not None:
        total += cfg.modification_weight * f2_projected
    return -cfg.guidance_scale * total
