"""Black-box discrete-time systems, the two benchmark plants and trajectory tools."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from deltaiss.errors import BoxViolation, DomainError

BOX_TOL = 1e-12
SQRT_GUARD = 1e-12


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.ndim != 1 or lo.shape != hi.shape or lo.size < 1:
            raise ValueError(f"box bounds must be equal-length vectors, got {lo.shape} and {hi.shape}")
        if np.any(lo > hi):
            raise ValueError(f"box has lower > upper: {lo} vs {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.widths))

    def contains(self, points, tol: float = BOX_TOL) -> np.ndarray:
        """Row-wise membership test for an ``(..., dim)`` array."""
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=-1)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.lower + rng.random((size, self.dim)) * self.widths

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        return cls(d["lower"], d["upper"])


@dataclass
class DiscreteSystem:
    """A system ``x(k+1) = f(x(k), u(k))`` known only through its step oracle.

    ``dynamics`` must accept ``(B, n)`` states and ``(B, m)`` inputs and return
    ``(B, n)`` next states. Everything outside this module talks to a system
    through :meth:`step` only.
    """

    state_box: Box
    input_box: Box
    dynamics: Callable[[np.ndarray, np.ndarray], np.ndarray]
    name: str = "system"
    params: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.state_box.dim

    @property
    def input_dim(self) -> int:
        return self.input_box.dim

    def step(self, x, u, check: bool = True) -> np.ndarray:
        """Apply the oracle to one state/input or to a batch of them."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim <= 1
        X = x.reshape(-1, self.state_dim)
        U = u.reshape(-1, self.input_dim)
        if X.shape[0] != U.shape[0]:
            raise ValueError(f"got {X.shape[0]} states but {U.shape[0]} inputs")
        if check:
            bad = ~self.state_box.contains(X)
            if bad.any():
                raise BoxViolation(f"state {X[np.argmax(bad)]} outside state box")
            bad = ~self.input_box.contains(U)
            if bad.any():
                raise BoxViolation(f"input {U[np.argmax(bad)]} outside input box")
        out = np.asarray(self.dynamics(X, U), dtype=float).reshape(X.shape)
        return out[0] if single else out


def make_scalar_decay(tau: float = 0.01, a: float = -1.0, state_box: Box | None = None,
                      input_box: Box | None = None) -> DiscreteSystem:
    """Euler-discretised square-root decay ``x + tau*(a*sqrt(x) + u)``."""
    if tau <= 0:
        raise ValueError("tau must be positive")

    def f(X, U):
        if np.any(X < -SQRT_GUARD):
            raise DomainError(f"square root of negative state {X.min()}")
        Xc = np.maximum(X, 0.0)
        return X + tau * (a * np.sqrt(Xc) + U)

    return DiscreteSystem(
        state_box=state_box or Box([0.0], [0.5]),
        input_box=input_box or Box([0.0], [0.5]),
        dynamics=f,
        name="scalar",
        params={"tau": tau, "a": a},
    )


def make_dc_motor(tau: float = 0.001, Ra: float = 1.0, La: float = 0.01, J: float = 0.01, B: float = 1.0,
                  kb: float = 0.01, state_box: Box | None = None, input_box: Box | None = None) -> DiscreteSystem:
    """Permanent-magnet DC motor; state is (armature current, shaft speed), input the voltage."""
    for name, v in dict(tau=tau, Ra=Ra, La=La, J=J, B=B, kb=kb).items():
        if v <= 0:
            raise ValueError(f"{name} must be positive")

    def f(X, U):
        i, w = X[:, 0], X[:, 1]
        v = U[:, 0]
        i_next = i + tau * (-Ra / La * i - kb / La * w + v / La)
        w_next = w + tau * (kb / J * i - B / J * w)
        return np.stack([i_next, w_next], axis=1)

    return DiscreteSystem(
        state_box=state_box or Box([0.0, 0.0], [0.2, 0.2]),
        # the forward-invariant band around the voltages used in the experiments
        input_box=input_box or Box([0.17], [0.18]),
        dynamics=f,
        name="dcmotor",
        params={"tau": tau, "Ra": Ra, "La": La, "J": J, "B": B, "kb": kb},
    )


@dataclass
class Trajectory:
    states: np.ndarray  # (K+1, n)
    inputs: np.ndarray  # (K, m)

    def __post_init__(self):
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("a trajectory has exactly one more state than inputs")

    def __len__(self):
        return len(self.states)

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.inputs.ndim == 2 else 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
            for k, x in enumerate(self.states):
                u = [repr(float(v)) for v in self.inputs[k]] if k < len(self.inputs) else [""] * m
                w.writerow([k] + [repr(float(v)) for v in x] + u)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = sum(h.startswith("x") for h in header)
        states = np.array([[float(v) for v in r[1:1 + n]] for r in body])
        inputs = np.array([[float(v) for v in r[1 + n:]] for r in body[:-1]]).reshape(len(body) - 1, -1)
        return cls(states, inputs)


def simulate(sys: DiscreteSystem, x0, inputs) -> Trajectory:
    """Roll the oracle forward; raises :class:`BoxViolation` at the first state that exits the box."""
    x = np.asarray(x0, dtype=float).reshape(sys.state_dim)
    U = np.asarray(inputs, dtype=float).reshape(-1, sys.input_dim)
    if not sys.state_box.contains(x):
        raise BoxViolation(f"initial state {x} outside state box", index=0)
    bad = ~sys.input_box.contains(U)
    if bad.any():
        raise BoxViolation(f"input {U[np.argmax(bad)]} outside input box", index=int(np.argmax(bad)))
    states = np.empty((len(U) + 1, sys.state_dim))
    states[0] = x
    for k, u in enumerate(U):
        x = sys.step(x, u, check=False)
        if not sys.state_box.contains(x):
            raise BoxViolation(f"state left the box at step {k + 1}: {x}", index=k + 1)
        states[k + 1] = x
    return Trajectory(states, U)


def pairwise_gap(t1: Trajectory, t2: Trajectory) -> np.ndarray:
    if len(t1) != len(t2):
        raise ValueError(f"trajectory lengths differ: {len(t1)} vs {len(t2)}")
    return np.linalg.norm(t1.states - t2.states, axis=1)
