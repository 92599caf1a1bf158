"""Lipschitz constants: extreme-value estimates for the unknown plant, exact ones
for the comparison-function templates, and the composite certificate constant."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from deltaiss.dynamics import DiscreteSystem

DEGENERATE_SPREAD = 1e-6
SAFETY_FACTOR = 1.1


@dataclass(frozen=True)
class KTemplate:
    """Comparison function ``s -> k * s**gamma``."""

    k: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.gamma >= 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")

    def __call__(self, s):
        return self.k * np.power(s, self.gamma)


@dataclass
class LipschitzEstimate:
    value: float
    n_batches: int
    batch_maxima: list
    fit_location: float
    fit_ci_upper: float
    fit_shape: float = float("nan")
    fit_scale: float = float("nan")
    degenerate: bool = False
    axis: str = "state"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def select(self, mode: str = "ci95") -> float:
        if mode == "point":
            return self.value
        if mode == "ci95":
            return self.fit_ci_upper
        raise ValueError(f"unknown lipschitz mode {mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _perturb(rng, box, anchors, delta):
    """Points at distance exactly ``delta`` from each anchor, reflected to stay in the box."""
    v = rng.standard_normal(anchors.shape)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    step = delta * v
    moved = anchors + step
    out = ~box.contains(moved, tol=0.0)
    moved[out] = anchors[out] - step[out]
    # boxes thinner than 2*delta along some axis
    return np.clip(moved, box.lower, box.upper)


def batch_quotient_maxima(sys: DiscreteSystem, axis: str, n_batches: int, batch_size: int, delta: float,
                          seed: int) -> np.ndarray:
    if axis not in ("state", "input"):
        raise ValueError(f"axis must be 'state' or 'input', got {axis!r}")
    maxima = np.empty(n_batches)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_batches)):
        rng = np.random.default_rng(child)
        X = sys.state_box.sample(rng, batch_size)
        U = sys.input_box.sample(rng, batch_size)
        if axis == "state":
            X2, U2 = _perturb(rng, sys.state_box, X, delta), U
            den = np.linalg.norm(X2 - X, axis=1)
        else:
            X2, U2 = X, _perturb(rng, sys.input_box, U, delta)
            den = np.linalg.norm(U2 - U, axis=1)
        num = np.linalg.norm(sys.step(X2, U2) - sys.step(X, U), axis=1)
        ok = den > 0
        maxima[i] = (num[ok] / den[ok]).max() if ok.any() else 0.0
    return maxima


def fit_reverse_weibull(maxima: np.ndarray):
    """MLE ``(shape, location, scale)`` of a reverse Weibull; None if the fit is unusable."""
    hi, spread = maxima.max(), np.ptp(maxima)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            c, loc, scale = stats.weibull_max.fit(maxima)
        except Exception:
            return None
    # the location is the support endpoint; it cannot sit below the data or absurdly far above it
    if not all(np.isfinite([c, loc, scale])) or scale <= 0 or c <= 0:
        return None
    if loc < hi - 1e-12 * max(1.0, abs(hi)) or loc > hi + 10.0 * spread:
        return None
    return c, loc, scale


def estimate_system_lipschitz(sys: DiscreteSystem, axis: str = "state", n_batches: int = 100,
                              batch_size: int = 500, delta: float = 1e-3, seed: int = 0,
                              n_boot: int = 100) -> LipschitzEstimate:
    """Reverse-Weibull estimate of the plant's Lipschitz constant along one argument.

    Batch maxima of difference quotients are fitted by maximum likelihood; the
    fitted location (right endpoint) is the point estimate and the 95th
    percentile of bootstrap refits is the conservative bound.
    """
    if n_batches < 30:
        raise ValueError("need at least 30 batches for the extreme-value fit")
    if delta <= 0:
        raise ValueError("delta must be positive")
    maxima = batch_quotient_maxima(sys, axis, n_batches, batch_size, delta, seed)
    hi = float(maxima.max())
    spread = float(np.ptp(maxima))
    fit = None if spread <= DEGENERATE_SPREAD * max(hi, 1e-300) else fit_reverse_weibull(maxima)
    if fit is None:
        return LipschitzEstimate(value=hi, n_batches=n_batches, batch_maxima=maxima.tolist(), fit_location=hi,
                                 fit_ci_upper=SAFETY_FACTOR * hi, degenerate=True, axis=axis, seed=seed)
    c, loc, scale = fit
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    locs = [loc]
    for _ in range(n_boot):
        refit = fit_reverse_weibull(rng.choice(maxima, size=maxima.size, replace=True))
        if refit is not None:
            locs.append(refit[1])
    ci_upper = max(float(np.percentile(locs, 95)), loc)
    return LipschitzEstimate(value=float(loc), n_batches=n_batches, batch_maxima=maxima.tolist(),
                             fit_location=float(loc), fit_ci_upper=ci_upper, fit_shape=float(c),
                             fit_scale=float(scale), axis=axis, seed=seed, extra={"n_boot_ok": len(locs) - 1})


def classk_lipschitz(t: KTemplate, domain_diameter: float) -> float:
    """Global Lipschitz constant of ``k s**gamma`` on ``[0, D]``, i.e. ``k gamma D**(gamma-1)``."""
    if t.gamma < 1:
        raise ValueError("templates with gamma < 1 are not Lipschitz at 0")
    if domain_diameter <= 0:
        raise ValueError("domain_diameter must be positive")
    if t.gamma == 1:
        return float(t.k)
    return float(t.k * t.gamma * domain_diameter ** (t.gamma - 1))


def composite_L(LL: float, Lx: float, Lu: float, L1: float, L2: float, L3: float, Lsu: float) -> float:
    """Constant multiplying epsilon in the validity condition ``eta* + L eps <= 0``."""
    if min(LL, Lx, Lu, L1, L2, L3, Lsu) < 0:
        raise ValueError("Lipschitz constants must be non-negative")
    r2 = math.sqrt(2.0)
    return max(r2 * LL + 2 * L1, r2 * LL + 2 * L2, r2 * LL * (Lx + Lu + 1) + 2 * (L3 + Lsu))


def template_constants(templates, state_diameter: float, input_diameter: float) -> tuple:
    """``(L1, L2, L3, Lu)`` for templates ``(alpha1, alpha2, alpha3, sigma)``."""
    a1, a2, a3, su = templates
    return (classk_lipschitz(a1, state_diameter), classk_lipschitz(a2, state_diameter),
            classk_lipschitz(a3, state_diameter), classk_lipschitz(su, input_diameter))
