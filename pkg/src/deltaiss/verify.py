"""Certification of a trained Lyapunov net.

The scenario residual is the smallest eta satisfying every sampled constraint,
i.e. the maximum over sampled pairs of the three constraint left-hand sides.
A net is certified when that residual plus ``L * eps`` is non-positive and its
Lipschitz certificate matrix is PSD.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from deltaiss.dynamics import Box, DiscreteSystem, simulate
from deltaiss.errors import BoxViolation, InfeasibleBudget
from deltaiss.network import ACTIVATIONS, LyapunovNet, assemble_P
from deltaiss.sampling import SampleSet

DEFAULT_BUDGET = 10**9
BLOCK_ELEMS = 1 << 21  # pair-values per streamed block

FAMILIES = ("lower", "upper", "decrease")
GAIN_SAFETY = 2.0


# Fixed-order elementwise arithmetic: a pair's value does not depend on the
# shape of the block it was evaluated in, so witnesses replay bit-exactly.

def _halves(net: LyapunovNet, X, Xh):
    n = net.state_dim
    W, b = net.weights[0], net.biases[0]
    A = np.broadcast_to(b, (len(X), len(b))).copy()
    B = np.zeros((len(Xh), len(b)))
    for k in range(n):
        A += X[:, k, None] * W[None, :, k]
        B += Xh[:, k, None] * W[None, :, n + k]
    return A, B


def _tail(net: LyapunovNet, pre):
    phi, _ = ACTIVATIONS[net.activation]
    h = phi(pre)
    for W, b in zip(net.weights[1:-1], net.biases[1:-1]):
        nxt = np.broadcast_to(b, h.shape[:-1] + b.shape).copy()
        for k in range(W.shape[1]):
            nxt += h[..., k, None] * W[:, k]
        h = phi(nxt)
    w, b = net.weights[-1][0], net.biases[-1][0]
    out = np.full(h.shape[:-1], b)
    for k in range(w.size):
        out += h[..., k] * w[k]
    return out


def pair_values(net: LyapunovNet, X, Xh) -> np.ndarray:
    """``V(X[i], Xh[i])`` with the verifier's fixed evaluation order."""
    X = np.asarray(X, dtype=float).reshape(-1, net.state_dim)
    Xh = np.asarray(Xh, dtype=float).reshape(-1, net.state_dim)
    if net.n_hidden_layers == 0:
        w, b = net.weights[0][0], net.biases[0][0]
        out = np.full(len(X), b)
        for k in range(net.state_dim):
            out += X[:, k] * w[k]
            out += Xh[:, k] * w[net.state_dim + k]
        return out
    A, B = _halves(net, X, Xh)
    return _tail(net, A + B)


def _all_pair_values(net: LyapunovNet, P, Q, rows=None) -> np.ndarray:
    """``V(P[i], Q[j])`` for ``i in rows`` and all ``j``."""
    rows = np.arange(len(P)) if rows is None else rows
    if net.n_hidden_layers == 0:
        return pair_values(net, np.repeat(P[rows], len(Q), axis=0), np.tile(Q, (len(rows), 1))).reshape(
            len(rows), len(Q))
    A, _ = _halves(net, P[rows], P[rows][:0])
    _, B = _halves(net, Q[:0], Q)
    return _tail(net, A[:, None, :] + B[None, :, :])


def _alpha(t, d):
    return t.k * np.power(d, t.gamma)


@dataclass
class Witness:
    family: str
    residual: float
    q: int
    r: int
    a: int = -1
    b: int = -1
    x_q: list = field(default_factory=list)
    x_r: list = field(default_factory=list)
    u_q: list = field(default_factory=list)
    u_r: list = field(default_factory=list)


def _subset_size(ss: SampleSet, stride: int) -> int:
    if stride <= 1:
        return len(ss)
    if ss.shape:
        return math.prod(len(_axis_keep(c, stride)) for c in ss.shape)
    return len(range(0, len(ss), stride))


def _axis_keep(c: int, stride: int) -> np.ndarray:
    """Every ``stride``-th grid index along one axis, plus the last one."""
    return np.unique(np.r_[np.arange(stride // 2, c, stride), c - 1])


def _grid_subset(ss: SampleSet, stride: int):
    """Strided sub-grid indices and the covering distance from the full set to the subset."""
    if stride <= 1:
        return np.arange(len(ss)), 0.0
    if ss.shape:
        axes_idx, sq = [], 0.0
        for i, c in enumerate(ss.shape):
            keep = _axis_keep(c, stride)
            coords = np.arange(c)
            gap = np.min(np.abs(coords[:, None] - keep[None, :]), axis=1).max()
            sq += (gap * ss.box.widths[i] / c) ** 2
            axes_idx.append(keep)
        mesh = np.meshgrid(*axes_idx, indexing="ij")
        flat = np.ravel_multi_index([m.ravel() for m in mesh], ss.shape)
        return flat, math.sqrt(sq)
    idx = np.arange(0, len(ss), stride)
    sub = SampleSet(ss.points[idx], 0.0, ss.box)
    return idx, float(sub.nearest_distance(ss.points).max())


def scp_residual(net: LyapunovNet, states: SampleSet, inputs: SampleSet, sys: DiscreteSystem, templates,
                 budget: int = DEFAULT_BUDGET, allow_coarsen: bool = True, L: float | None = None,
                 skip_decrease_above: float | None = None):
    """Scenario residual over every ordered pair of samples.

    Returns ``(eta_star, witnesses, info)``. When the decrease family needs more
    than ``budget`` evaluations it is evaluated on strided sub-grids and, to
    stay sound, inflated by ``L`` times the sub-grid covering distance.
    With ``skip_decrease_above`` set, the decrease family is not evaluated once
    the lower/upper residuals already exceed it; ``eta_star`` is then only a
    lower bound and ``info["decrease_skipped"]`` is True.
    """
    a1, a2, a3, su = templates
    X, U = states.points, inputs.points
    N, M = len(X), len(U)
    info = {"n_states": N, "n_inputs": M, "coarsened": False, "evaluations": 0}
    witnesses = {}

    # lower/upper families: all N^2 state pairs, streamed by rows
    best = {"lower": (-np.inf, 0, 0), "upper": (-np.inf, 0, 0)}
    Vxx = np.empty((N, N)) if N * N <= 4 * BLOCK_ELEMS else None
    rows_per = max(1, BLOCK_ELEMS // max(N * max(net.widths[1:-1] or [1]), 1))
    for s in range(0, N, rows_per):
        rows = np.arange(s, min(N, s + rows_per))
        V = _all_pair_values(net, X, X, rows)
        D = np.linalg.norm(X[rows, None, :] - X[None, :, :], axis=2)
        for fam, g in (("lower", -V + _alpha(a1, D)), ("upper", V - _alpha(a2, D))):
            i = int(np.argmax(g))
            if g.flat[i] > best[fam][0]:
                best[fam] = (float(g.flat[i]), int(rows[i // N]), int(i % N))
        if Vxx is not None:
            Vxx[rows] = V
    info["evaluations"] += 2 * N * N
    for fam in ("lower", "upper"):
        res, q, r = best[fam]
        witnesses[fam] = Witness(fam, res, q, r, x_q=X[q].tolist(), x_r=X[r].tolist())

    if skip_decrease_above is not None and max(best["lower"][0], best["upper"][0]) > skip_decrease_above:
        info["decrease_skipped"] = True
        return max(best["lower"][0], best["upper"][0]), witnesses, info

    # decrease family: N^2 M^2 tuples
    sx = su_ = 1
    while (_subset_size(states, sx) * _subset_size(inputs, su_)) ** 2 > budget:
        if not allow_coarsen:
            raise InfeasibleBudget(f"decrease family needs {(N * M) ** 2:.3g} evaluations, budget {budget:.3g}")
        if _subset_size(states, sx) >= _subset_size(inputs, su_) and _subset_size(states, sx) > 1:
            sx += 1
        elif _subset_size(inputs, su_) > 1:
            su_ += 1
        else:
            raise InfeasibleBudget(f"budget {budget} is below a single evaluation")
    qi, dx = _grid_subset(states, sx)
    ai, du = _grid_subset(inputs, su_)
    inflation = 0.0
    if sx > 1 or su_ > 1:
        if L is None:
            raise InfeasibleBudget("coarsened evaluation needs the composite Lipschitz constant L")
        inflation = L * max(dx, du)
        info.update(coarsened=True, state_stride=sx, input_stride=su_, state_cover=dx, input_cover=du,
                    inflation=inflation)
    Xc, Uc = X[qi], U[ai]
    n_, m_ = len(Xc), len(Uc)
    F = sys.step(np.repeat(Xc, m_, axis=0), np.tile(Uc, (n_, 1)))  # F[q*m_ + a] = f(x_q, u_a)
    Dc = np.linalg.norm(Xc[:, None, :] - Xc[None, :, :], axis=2)
    if Vxx is not None:
        Vc = Vxx[np.ix_(qi, qi)]
    else:
        Vc = _all_pair_values(net, Xc, Xc)
    sig = _alpha(su, np.linalg.norm(Uc[:, None, :] - Uc[None, :, :], axis=2))  # [a, b]
    T = n_ * m_
    rows_per = max(1, BLOCK_ELEMS // max(T * max(net.widths[1:-1] or [1]), 1))
    top = (-np.inf, 0, 0, 0, 0)
    for s in range(0, T, rows_per):
        rows = np.arange(s, min(T, s + rows_per))
        VF = _all_pair_values(net, F, F, rows).reshape(len(rows), n_, m_)  # [i=(q,a), r, b]
        qq, aa = rows // m_, rows % m_
        g = ((VF - Vc[qq][:, :, None]) + _alpha(a3, Dc[qq])[:, :, None]) - sig[aa][:, None, :]
        i = int(np.argmax(g))
        if g.flat[i] > top[0]:
            blk, rest = divmod(i, n_ * m_)
            r, b = divmod(rest, m_)
            top = (float(g.flat[i]), int(qi[qq[blk]]), int(qi[r]), int(ai[aa[blk]]), int(ai[b]))
    info["evaluations"] += T * T
    res, q, r, a, b = top
    witnesses["decrease"] = Witness("decrease", res, q, r, a, b, X[q].tolist(), X[r].tolist(), U[a].tolist(),
                                    U[b].tolist())
    info["decrease_raw"] = res
    eta_star = max(witnesses["lower"].residual, witnesses["upper"].residual, res + inflation)
    return float(eta_star), witnesses, info


def replay_witness(net: LyapunovNet, sys: DiscreteSystem, templates, w: Witness) -> float:
    """Recompute one constraint residual from the witness' stored points."""
    a1, a2, a3, su = templates
    xq, xr = np.array([w.x_q]), np.array([w.x_r])
    d = np.linalg.norm(xq - xr, axis=1)
    v = pair_values(net, xq, xr)
    if w.family == "lower":
        return float((-v + _alpha(a1, d))[0])
    if w.family == "upper":
        return float((v - _alpha(a2, d))[0])
    uq, ur = np.array([w.u_q]), np.array([w.u_r])
    vf = pair_values(net, sys.step(xq, uq), sys.step(xr, ur))
    du = np.linalg.norm(uq - ur, axis=1)
    return float((((vf - v) + _alpha(a3, d)) - _alpha(su, du))[0])


def json_default(o):
    """numpy scalars and arrays as plain JSON values."""
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


@dataclass
class CertificationReport:
    eta_star: float
    L: float
    eps: float
    margin: float
    psd_ok: bool
    min_eig: float
    residuals: dict
    witnesses: dict
    verdict: str
    eta_trained: float | None = None
    details: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.verdict == "certified"

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=json_default)

    def summary(self) -> str:
        lines = [f"verdict      : {self.verdict}",
                 f"eta*_S       : {self.eta_star:.6g}",
                 f"L            : {self.L:.6g}",
                 f"eps          : {self.eps:.6g}",
                 f"margin       : {self.margin:.6g}",
                 f"P psd        : {self.psd_ok} (min eig {self.min_eig:.3e})"]
        for fam in FAMILIES:
            if fam in self.residuals:
                lines.append(f"  {fam:9s}  : {self.residuals[fam]:.6g}")
        if self.details.get("coarsened"):
            lines.append(f"  coarsened, inflation {self.details['inflation']:.3g}")
        return "\n".join(lines)


def validity_check(eta_star: float, L: float, eps: float, psd_ok: bool = True):
    """``(margin, certified)`` for the condition ``eta_star + L * eps <= 0``."""
    margin = eta_star + L * eps
    return margin, bool(margin <= 0 and psd_ok)


def certify(net: LyapunovNet, sys: DiscreteSystem, states: SampleSet, inputs: SampleSet, templates, L: float,
            eps: float | None = None, budget: int = DEFAULT_BUDGET, allow_coarsen: bool = True,
            eta_trained: float | None = None) -> CertificationReport:
    eps = max(states.radius, inputs.radius) if eps is None else eps
    cm = assemble_P(net)
    eta_star, wit, info = scp_residual(net, states, inputs, sys, templates, budget, allow_coarsen, L)
    margin, ok = validity_check(eta_star, L, eps, cm.psd_ok)
    return CertificationReport(
        eta_star=eta_star, L=L, eps=eps, margin=margin, psd_ok=cm.psd_ok, min_eig=cm.min_eig,
        residuals={k: w.residual for k, w in wit.items()}, witnesses={k: asdict(w) for k, w in wit.items()},
        verdict="certified" if ok else "not-certified", eta_trained=eta_trained, details=info)


def refined_grid(box: Box, count: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, count) if hi > lo else np.array([lo]) for lo, hi in zip(box.lower, box.upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)


def grid_oracle(net: LyapunovNet, sys: DiscreteSystem, templates, refine: int = 3, states: SampleSet | None = None,
                inputs: SampleSet | None = None, base_count: int = 16, budget: int = 10**8) -> dict:
    """Worst residual of the Lyapunov conditions (no eta) on a grid ``refine`` times finer.

    The grid resolution per axis is ``refine`` times the training net's (or
    ``base_count`` when no net is given), endpoints included.
    """
    if refine < 2:
        raise ValueError("refine must be >= 2")

    def counts(ss, box):
        if ss is not None and ss.shape:
            return max(ss.shape) * refine
        if ss is not None:
            return max(2, int(round(len(ss) ** (1 / box.dim)))) * refine
        return base_count * refine

    Xg = refined_grid(sys.state_box, counts(states, sys.state_box))
    Ug = refined_grid(sys.input_box, counts(inputs, sys.input_box))
    cost = len(Xg) ** 2 * (len(Ug) ** 2 + 2)
    if cost > budget:
        raise InfeasibleBudget(f"grid oracle needs {cost:.3g} evaluations, budget {budget:.3g}")
    gx = SampleSet(Xg, 0.0, sys.state_box)
    gu = SampleSet(Ug, 0.0, sys.input_box)
    _, wit, info = scp_residual(net, gx, gu, sys, templates, budget=cost, allow_coarsen=False)
    out = {fam: wit[fam].residual for fam in FAMILIES}
    out.update(worst=max(out.values()), n_states=len(Xg), n_inputs=len(Ug), witnesses={k: asdict(w) for k, w in wit.items()})
    return out


@dataclass
class FalsificationResult:
    worst_violation: float
    contraction_ok: bool
    input_gain: float
    n_trials: int
    truncated: int
    worst_trial: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return self.worst_violation > 1e-12 or not self.contraction_ok


def _run(sys, x0, u, horizon):
    """States until horizon or until the trajectory leaves the box."""
    try:
        return simulate(sys, x0, np.repeat(u[None], horizon, axis=0)).states
    except BoxViolation as exc:
        if not exc.index:
            raise
        return simulate(sys, x0, np.repeat(u[None], exc.index - 1, axis=0)).states


def falsify_delta_iss(sys: DiscreteSystem, n_trials: int = 100, horizon: int = 200, seed: int = 0,
                      tol: float = 1e-12) -> FalsificationResult:
    """Search for trajectory pairs contradicting incremental ISS.

    First the input gain ``c`` is calibrated from pairs with equal initial
    states and different constant inputs (there the terminal gap is pure input
    effect). Then for random pairs the violation is
    ``terminal_gap - initial_gap - c * |u - uhat|``; under equal inputs the gap
    must also not grow from start to horizon. The calibrated gain carries a
    factor-2 margin. Finding nothing is evidence, not proof.
    """
    rng = np.random.default_rng(seed)
    gain, truncated = 0.0, 0
    for _ in range(max(1, n_trials)):
        x0 = sys.state_box.sample(rng, 1)[0]
        u, uh = sys.input_box.sample(rng, 2)
        du = np.linalg.norm(u - uh)
        a, b = _run(sys, x0, u, horizon), _run(sys, x0, uh, horizon)
        k = min(len(a), len(b)) - 1
        if du > 0 and k > 0:
            gain = max(gain, np.linalg.norm(a[k] - b[k]) / du)
    gain *= GAIN_SAFETY
    worst, worst_trial, contraction_ok = -np.inf, {}, True
    for t in range(n_trials):
        x0, xh0 = sys.state_box.sample(rng, 2)
        u = sys.input_box.sample(rng, 1)[0]
        uh = u.copy() if t % 2 == 0 else sys.input_box.sample(rng, 1)[0]
        a, b = _run(sys, x0, u, horizon), _run(sys, xh0, uh, horizon)
        k = min(len(a), len(b)) - 1
        truncated += k < horizon
        g0, gk = np.linalg.norm(a[0] - b[0]), np.linalg.norm(a[k] - b[k])
        v = gk - g0 - gain * np.linalg.norm(u - uh)
        if t % 2 == 0 and k > 0 and gk > g0 * (1 + 1e-9) + tol:
            contraction_ok = False
        if v > worst:
            worst = float(v)
            worst_trial = {"x0": x0.tolist(), "xh0": xh0.tolist(), "u": u.tolist(), "uh": uh.tolist(),
                           "steps": int(k), "initial_gap": float(g0), "terminal_gap": float(gk)}
    return FalsificationResult(float(worst), contraction_ok, float(gain), n_trials, int(truncated), worst_trial)
