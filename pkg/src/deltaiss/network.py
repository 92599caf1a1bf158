"""Neural Lyapunov candidate V(x, xhat) and its Lipschitz certificate matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from deltaiss.dynamics import Box
from deltaiss.errors import BarrierViolation, SchemaError

FORMAT_HEADER = "# deltaiss-lyapunov-net v1"
PSD_RTOL = 1e-10

ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, h: 1.0 - h * h),
    "relu": (lambda a: np.maximum(a, 0.0), lambda a, h: (a > 0).astype(float)),
}


@dataclass
class LyapunovNet:
    """Feed-forward network on the stacked pair ``[x; xhat]`` with a scalar output.

    ``weights[i]`` has shape ``(widths[i+1], widths[i])``. ``lambdas[i]`` is the
    positive diagonal of the multiplier for hidden layer ``i+1``; together with
    the fixed ``lipschitz_bound`` they parameterise the certificate matrix.
    """

    weights: list
    biases: list
    lambdas: list
    lipschitz_bound: float
    activation: str = "tanh"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        self.lambdas = [np.asarray(l, dtype=float).reshape(-1) for l in self.lambdas]
        self.validate()

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise SchemaError(f"unknown activation {self.activation!r}")
        if len(self.weights) < 1 or len(self.biases) != len(self.weights):
            raise SchemaError("need one bias per weight matrix")
        if len(self.lambdas) != len(self.weights) - 1:
            raise SchemaError(f"expected {len(self.weights) - 1} multiplier blocks, got {len(self.lambdas)}")
        widths = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        if widths[0] % 2 or widths[-1] != 1:
            raise SchemaError(f"input width must be even and output width 1, got {widths}")
        for i, w in enumerate(self.weights):
            if w.ndim != 2 or w.shape != (widths[i + 1], widths[i]):
                raise SchemaError(f"weight {i} has shape {w.shape}, expected {(widths[i + 1], widths[i])}")
            if self.biases[i].shape != (widths[i + 1],):
                raise SchemaError(f"bias {i} has shape {self.biases[i].shape}")
        for i, lam in enumerate(self.lambdas):
            if lam.shape != (widths[i + 1],):
                raise SchemaError(f"multiplier {i + 1} has shape {lam.shape}, expected ({widths[i + 1]},)")
            if not np.all(lam > 0):
                raise SchemaError(f"multiplier {i + 1} has non-positive entries")
        if not self.lipschitz_bound > 0:
            raise SchemaError("lipschitz_bound must be positive")

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def state_dim(self) -> int:
        return self.widths[0] // 2

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 1

    @classmethod
    def initialize(cls, state_dim: int, hidden: list, lipschitz_bound: float, seed: int = 0,
                   activation: str = "tanh", scale: float = 0.5) -> "LyapunovNet":
        """Small random weights, unit multipliers; shrunk until the certificate matrix is PD."""
        rng = np.random.default_rng(seed)
        widths = [2 * state_dim] + list(hidden) + [1]
        weights = [rng.standard_normal((widths[i + 1], widths[i])) * scale / np.sqrt(widths[i])
                   for i in range(len(widths) - 1)]
        biases = [rng.standard_normal(widths[i + 1]) * 0.1 * scale for i in range(len(widths) - 1)]
        biases[-1][:] = 0.0
        lambdas = [np.ones(h) for h in hidden]
        net = cls(weights, biases, lambdas, lipschitz_bound, activation)
        for _ in range(60):
            if assemble_P(net).min_eig > 0:
                return net
            net.weights = [0.7 * w for w in net.weights]
        raise BarrierViolation("could not find an initial net with a PD certificate matrix")

    def copy(self) -> "LyapunovNet":
        return LyapunovNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           [l.copy() for l in self.lambdas], self.lipschitz_bound, self.activation)

    def layers(self, Z):
        """Pre- and post-activation values per layer for a batch of stacked pairs."""
        phi, _ = ACTIVATIONS[self.activation]
        pre, post = [], [Z]
        h = Z
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = h @ W.T + b
            h = phi(a)
            pre.append(a)
            post.append(h)
        out = h @ self.weights[-1].T + self.biases[-1]
        return pre, post, out[:, 0]

    def value(self, X, Xh) -> np.ndarray:
        """Batched ``V(X[i], Xh[i])``; no domain checks."""
        Z = np.concatenate([np.asarray(X, dtype=float), np.asarray(Xh, dtype=float)], axis=-1)
        return self.layers(Z.reshape(-1, self.widths[0]))[2]

    def backprop(self, pre, post, dV):
        """Gradients of ``sum(dV * V)`` w.r.t. weights and biases."""
        _, dphi = ACTIVATIONS[self.activation]
        gW = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        g = dV[:, None]
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = g.T @ post[i]
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i]) * dphi(pre[i - 1], post[i])
        return gW, gb


def forward(net: LyapunovNet, x, xhat) -> float:
    """``V(x, xhat)`` for a single pair, with dimension checks."""
    x = np.asarray(x, dtype=float).reshape(-1)
    xhat = np.asarray(xhat, dtype=float).reshape(-1)
    if x.size != net.state_dim or xhat.size != net.state_dim:
        raise ValueError(f"net expects states of dimension {net.state_dim}, got {x.size} and {xhat.size}")
    return float(net.value(x[None], xhat[None])[0])


@dataclass
class CertificateMatrix:
    P: np.ndarray
    min_eig: float
    logdet: float | None
    offsets: list = field(default_factory=list)

    @property
    def psd_ok(self) -> bool:
        """Numerically PSD; strict PD is required separately by the barrier."""
        return bool(self.min_eig >= -PSD_RTOL * max(np.linalg.norm(self.P, 2), 1.0))

    @property
    def pd(self) -> bool:
        return self.logdet is not None


def block_offsets(net: LyapunovNet) -> list:
    return list(np.cumsum([0] + net.widths))


def assemble_P(net: LyapunovNet) -> CertificateMatrix:
    widths = net.widths
    off = block_offsets(net)
    q = off[-1]
    P = np.zeros((q, q))
    L2 = net.lipschitz_bound ** 2
    P[:widths[0], :widths[0]] = L2 * np.eye(widths[0])
    for i in range(1, len(widths) - 1):
        lam = net.lambdas[i - 1]
        s, e = off[i], off[i + 1]
        ps, pe = off[i - 1], off[i]
        P[s:e, s:e] = np.diag(2.0 * lam)
        blk = -lam[:, None] * net.weights[i - 1]
        P[s:e, ps:pe] = blk
        P[ps:pe, s:e] = blk.T
    s, e = off[-2], off[-1]
    P[s:e, s:e] = np.eye(widths[-1])
    P[s:e, off[-3]:s] = -net.weights[-1]
    P[off[-3]:s, s:e] = -net.weights[-1].T
    min_eig = float(np.linalg.eigvalsh(P)[0])
    logdet = None
    if min_eig > 0:
        try:
            c = la.cholesky(P, lower=True)
            logdet = float(2.0 * np.log(np.diag(c)).sum())
        except la.LinAlgError:
            pass
    return CertificateMatrix(P, min_eig, logdet, off)


def logdet_P(cm: CertificateMatrix) -> float:
    if cm.logdet is None:
        raise BarrierViolation(f"certificate matrix is not positive definite (min eig {cm.min_eig:.3e})")
    return cm.logdet


def logdet_gradient(net: LyapunovNet, cm: CertificateMatrix | None = None):
    """Gradients of ``log det P`` w.r.t. each weight matrix and each multiplier diagonal."""
    cm = cm or assemble_P(net)
    logdet_P(cm)
    G = la.cho_solve(la.cho_factor(cm.P, lower=True), np.eye(len(cm.P)))
    off = cm.offsets
    nl = len(net.weights)
    gW = [np.zeros_like(w) for w in net.weights]
    gl = [np.zeros_like(l) for l in net.lambdas]
    for i in range(1, nl):
        s, e, ps, pe = off[i], off[i + 1], off[i - 1], off[i]
        Gi = G[s:e, ps:pe]
        lam = net.lambdas[i - 1]
        gW[i - 1] = -2.0 * lam[:, None] * Gi
        gl[i - 1] = 2.0 * np.diag(G[s:e, s:e]) - 2.0 * np.sum(net.weights[i - 1] * Gi, axis=1)
    gW[-1] = -2.0 * G[off[-2]:off[-1], off[-3]:off[-2]]
    return gW, gl


def empirical_lipschitz(net: LyapunovNet, n_probes: int = 10_000, seed: int = 0, box: Box | None = None) -> float:
    """Largest observed difference quotient of V over probe pairs in ``box x box``.

    Half of the probes are independent pairs, half are pairs a small random
    step apart, which approximates the local gradient norm.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    n = net.state_dim
    box = box or Box(-np.ones(n), np.ones(n))
    lo = np.concatenate([box.lower, box.lower])
    hi = np.concatenate([box.upper, box.upper])
    rng = np.random.default_rng(seed)
    best = 0.0
    for s in range(0, n_probes, 50_000):
        k = min(50_000, n_probes - s)
        A = lo + rng.random((k, 2 * n)) * (hi - lo)
        B = lo + rng.random((k, 2 * n)) * (hi - lo)
        near = np.arange(k) % 2 == 1
        step = rng.standard_normal((k, 2 * n)) * 1e-4 * np.maximum(hi - lo, 1e-12)
        B[near] = np.clip(A[near] + step[near], lo, hi)
        den = np.linalg.norm(A - B, axis=1)
        ok = den > 0
        va = net.value(A[:, :n], A[:, n:])
        vb = net.value(B[:, :n], B[:, n:])
        if ok.any():
            best = max(best, float(np.max(np.abs(va - vb)[ok] / den[ok])))
    return best


def _fmt(a) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(a))


def serialize(net: LyapunovNet) -> str:
    lines = [FORMAT_HEADER,
             "widths " + " ".join(str(w) for w in net.widths),
             f"activation {net.activation}",
             f"lipschitz_bound {format(net.lipschitz_bound, '.17g')}"]
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"weight {i} {W.shape[0]} {W.shape[1]}")
        lines.extend(_fmt(row) for row in W)
        lines.append(f"bias {i} {b.size}")
        lines.append(_fmt(b))
    for i, lam in enumerate(net.lambdas):
        lines.append(f"lambda {i + 1} {lam.size}")
        lines.append(_fmt(lam))
    return "\n".join(lines) + "\n"


def deserialize(text: str, state_dim: int | None = None) -> LyapunovNet:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != FORMAT_HEADER:
        raise SchemaError("not a deltaiss model file (bad header)")
    try:
        it = iter(lines[1:])
        key, *ws = next(it).split()
        if key != "widths":
            raise SchemaError("expected widths line")
        widths = [int(w) for w in ws]
        if state_dim is not None and widths[0] != 2 * state_dim:
            raise SchemaError(f"model is for state dimension {widths[0] // 2}, expected {state_dim}")
        key, activation = next(it).split()
        key2, lb = next(it).split()
        if key != "activation" or key2 != "lipschitz_bound":
            raise SchemaError("expected activation and lipschitz_bound lines")
        weights, biases, lambdas = [], [], []
        for i in range(len(widths) - 1):
            tag, idx, r, c = next(it).split()
            if tag != "weight" or int(idx) != i or (int(r), int(c)) != (widths[i + 1], widths[i]):
                raise SchemaError(f"bad weight block header for layer {i}")
            weights.append(np.array([[float(v) for v in next(it).split()] for _ in range(int(r))]))
            tag, idx, size = next(it).split()
            if tag != "bias" or int(idx) != i:
                raise SchemaError(f"bad bias block header for layer {i}")
            biases.append(np.array([float(v) for v in next(it).split()]))
        for i in range(1, len(widths) - 1):
            tag, idx, size = next(it).split()
            if tag != "lambda" or int(idx) != i:
                raise SchemaError(f"bad multiplier block header for layer {i}")
            lambdas.append(np.array([float(v) for v in next(it).split()]))
    except StopIteration:
        raise SchemaError("model file truncated (missing blocks)") from None
    except ValueError as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"malformed model file: {exc}") from exc
    return LyapunovNet(weights, biases, lambdas, float(lb), activation)
