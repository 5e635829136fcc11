"""Tuning the attention/FFN balance ``alpha``.

Two routes: a one-pass grid search that maximizes Kendall's tau against
sampled ground truth and averages the two best grid points, and a
closed-form heuristic that needs only proxy-vs-parameter-count correlations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, OptimizationError, ValidationError
from .rankstats import kendall_tau

TIE_EPSILON = 1e-9


@dataclass(frozen=True)
class AlphaGrid:
    lo: float = -1.5
    hi: float = 1.5
    step: float = 0.1

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"alpha grid needs lo < hi, got {self.lo}:{self.hi}")
        if not self.step > 0:
            raise ValidationError(f"alpha grid step must be positive, got {self.step}")
        steps = (self.hi - self.lo) / self.step
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError(f"step {self.step} does not divide [{self.lo}, {self.hi}]")

    @property
    def size(self) -> int:
        return int(round((self.hi - self.lo) / self.step)) + 1

    def points(self) -> list[float]:
        # rounding keeps grid points equal to their decimal literals (0.3, not 0.30000000000000004)
        return [round(self.lo + i * self.step, 12) for i in range(self.size)]

    @classmethod
    def parse(cls, text: str) -> "AlphaGrid":
        """Parse ``lo:hi:step``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid must be lo:hi:step, got {text!r}")
        try:
            lo, hi, step = (float(p) for p in parts)
        except ValueError:
            raise ValidationError(f"grid must be numeric lo:hi:step, got {text!r}") from None
        return cls(lo, hi, step)


@dataclass(frozen=True)
class AlphaResult:
    alpha_star: float
    method: str
    grid_curve: tuple[tuple[float, float], ...] = ()
    top1: tuple[float, float] | None = None
    top2: tuple[float, float] | None = None
    sample_ids: tuple[str, ...] = ()
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "method": self.method,
            "top1": None if self.top1 is None else {"alpha": self.top1[0], "tau": self.top1[1]},
            "top2": None if self.top2 is None else {"alpha": self.top2[0], "tau": self.top2[1]},
            "grid_curve": [{"alpha": a, "tau": t} for a, t in self.grid_curve],
            "sample_ids": list(self.sample_ids),
            "details": self.details,
        }


@dataclass(frozen=True)
class HeuristicInputs:
    tau_ap: float
    tau_fp: float
    tau_af: float

    def __post_init__(self):
        for name in ("tau_ap", "tau_fp", "tau_af"):
            value = getattr(self, name)
            if not (-1.0 <= value <= 1.0):
                raise ValidationError(f"{name}={value} outside [-1, 1]")


def optimize_alpha_sampling(ground_truth, s_attn, s_ffn, grid: AlphaGrid | None = None,
                            sample_ids=()) -> AlphaResult:
    """Grid search for the blend that best ranks ``ground_truth``.

    Every grid point is evaluated exactly once. Grid points are ordered by
    tau (descending), ties going to the lower alpha; the result is the mean
    of the two leading alphas.
    """
    grid = grid or AlphaGrid()
    gt = np.asarray(ground_truth, dtype=np.float64)
    a = np.asarray(s_attn, dtype=np.float64)
    f = np.asarray(s_ffn, dtype=np.float64)
    if not (gt.shape == a.shape == f.shape) or gt.ndim != 1:
        raise ValidationError("ground truth, attention and FFN vectors must be 1-D and equal length")
    if gt.size < 3:
        raise ValidationError(f"need at least 3 samples, got {gt.size}")
    curve = []
    for alpha in grid.points():
        try:
            tau = kendall_tau(gt, alpha * a + (1.0 - alpha) * f)
        except DegenerateInputError:
            tau = math.nan
        curve.append((alpha, tau))
    ranked = sorted((p for p in curve if not math.isnan(p[1])), key=lambda p: (-p[1], p[0]))
    if not ranked:
        raise OptimizationError("Kendall tau is degenerate at every grid point")
    top1 = ranked[0]
    top2 = ranked[1] if len(ranked) > 1 else ranked[0]
    return AlphaResult(
        alpha_star=(top1[0] + top2[0]) / 2.0, method="sampling", grid_curve=tuple(curve),
        top1=top1, top2=top2, sample_ids=tuple(sample_ids),
        details={"grid": {"lo": grid.lo, "hi": grid.hi, "step": grid.step}, "n": int(gt.size)},
    )


def flag(phi: float, tau_ap: float) -> int:
    """+1 when the joint baseline exceeds tau_ap, else -1 (equality gives -1)."""
    return 1 if phi > tau_ap else -1


def heuristic_terms(h: HeuristicInputs, absolute: bool = False) -> tuple[float, float, int]:
    """Return ``(lam, phi, flag)``.

    ``absolute`` takes min/max over |tau| instead of signed values.
    """
    pair = (abs(h.tau_ap), abs(h.tau_fp)) if absolute else (h.tau_ap, h.tau_fp)
    lo, hi = min(pair), max(pair)
    if min(abs(h.tau_ap), abs(h.tau_fp)) <= TIE_EPSILON:
        raise DegenerateInputError(
            f"heuristic alpha divides by min(tau_ap, tau_fp) ~ 0 "
            f"(tau_ap={h.tau_ap}, tau_fp={h.tau_fp}, tau_af={h.tau_af})")
    lam = abs(hi * (1.0 - h.tau_af / lo))
    phi = (1.0 - h.tau_fp) * (1.0 - h.tau_ap) + h.tau_af
    return lam, phi, flag(phi, h.tau_ap)


def heuristic_alpha(h: HeuristicInputs, absolute: bool = False) -> float:
    lam, phi, sign = heuristic_terms(h, absolute)
    return lam + sign * phi
