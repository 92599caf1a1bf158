"""Grid epsilon-nets over boxes and random pair batches for training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deltaiss.dynamics import Box, DiscreteSystem
from deltaiss.errors import InfeasibleBudget, SchemaError

DEFAULT_POINT_CAP = 10**7


@dataclass
class SampleSet:
    """Finite set of points whose balls of ``radius`` cover ``box``."""

    points: np.ndarray  # (N, d)
    radius: float
    box: Box
    shape: tuple = ()  # per-axis counts of a grid net; empty for arbitrary point sets

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, self.box.dim)
        if not np.all(self.box.contains(self.points)):
            raise ValueError("sample set has points outside its box")
        if self.radius < 0:
            raise ValueError("negative covering radius")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.box.dim

    def nearest_distance(self, probes) -> np.ndarray:
        """Distance from each probe to its nearest sample."""
        P = np.asarray(probes, dtype=float).reshape(-1, self.dim)
        if self.shape:
            # grid nets: nearest point is found axis-by-axis
            h = self.box.widths / np.array(self.shape)
            idx = np.floor((P - self.box.lower) / np.where(h > 0, h, 1.0))
            idx = np.clip(idx, 0, np.array(self.shape) - 1)
            nearest = self.box.lower + (idx + 0.5) * h
            return np.linalg.norm(P - nearest, axis=1)
        out = np.empty(len(P))
        for s in range(0, len(P), 1024):
            d = np.linalg.norm(P[s:s + 1024, None, :] - self.points[None, :, :], axis=2)
            out[s:s + 1024] = d.min(axis=1)
        return out

    def to_csv(self, path) -> None:
        """Write ``x1,...,xd`` rows plus a ``.json`` sidecar with radius and box."""
        path = Path(path)
        header = ",".join(f"x{i + 1}" for i in range(self.dim))
        np.savetxt(path, self.points, delimiter=",", header=header, comments="", fmt="%.17g")
        sidecar = {"radius": self.radius, "box": self.box.to_dict(), "shape": list(self.shape)}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def from_csv(cls, path) -> "SampleSet":
        path = Path(path)
        side = path.with_suffix(path.suffix + ".json")
        if not side.exists():
            raise SchemaError(f"missing sidecar {side}")
        meta = json.loads(side.read_text())
        try:
            box = Box.from_dict(meta["box"])
            radius = float(meta["radius"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad sidecar {side}: {exc}") from exc
        pts = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if pts.shape[1] != box.dim:
            raise SchemaError(f"{path}: {pts.shape[1]} columns but box dimension {box.dim}")
        return cls(pts, radius, box, tuple(meta.get("shape", ())))


def build_epsilon_net(box: Box, target_radius: float, max_points: int = DEFAULT_POINT_CAP) -> SampleSet:
    """Cell-centred uniform grid whose covering radius is at most ``target_radius``.

    Each axis of width ``w`` gets ``ceil(w / h_max)`` cells with
    ``h_max = 2 r / sqrt(d)``; the stored radius is the exact half-diagonal of
    the largest cell.
    """
    if target_radius <= 0:
        raise ValueError("target_radius must be positive")
    d = box.dim
    h_max = 2.0 * target_radius / math.sqrt(d)
    counts = [max(1, math.ceil(w / h_max - 1e-12)) for w in box.widths]
    total = math.prod(counts)
    if total > max_points:
        raise InfeasibleBudget(f"epsilon-net needs {total} points, cap is {max_points}")
    axes = [box.lower[i] + (np.arange(c) + 0.5) * (box.widths[i] / c) for i, c in enumerate(counts)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    h = box.widths / np.array(counts)
    radius = float(0.5 * np.linalg.norm(h))
    return SampleSet(grid, radius, box, tuple(counts))


def effective_epsilon(state_set: SampleSet, input_set: SampleSet) -> float:
    return max(state_set.radius, input_set.radius)


@dataclass
class PairBatch:
    """Index-aligned pairs ``(x_q, x_r)``, ``(u_q, u_r)`` and their successors."""

    xq: np.ndarray
    xr: np.ndarray
    uq: np.ndarray
    ur: np.ndarray
    fq: np.ndarray | None = None
    fr: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.xq)

    def fill_next(self, sys: DiscreteSystem) -> "PairBatch":
        self.fq = sys.step(self.xq, self.uq)
        self.fr = sys.step(self.xr, self.ur)
        return self


def make_pair_batches(states: SampleSet, inputs: SampleSet, sys: DiscreteSystem, n_b: int, batch_size: int,
                      seed: int) -> list[PairBatch]:
    """Draw ``n_b`` batches of independent uniform (x_q, x_r, u_q, u_r) tuples.

    Batch ``i`` uses its own child seed so batches can be built in any order.
    """
    if n_b < 1 or batch_size < 1:
        raise ValueError("n_b and batch_size must be >= 1")
    if len(states) == 0 or len(inputs) == 0:
        raise ValueError("empty sample set")
    batches = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_b)):
        rng = np.random.default_rng(child)
        q, r = rng.integers(0, len(states), size=(2, batch_size))
        a, b = rng.integers(0, len(inputs), size=(2, batch_size))
        batch = PairBatch(states.points[q], states.points[r], inputs.points[a], inputs.points[b],
                          meta={"batch": i})
        batches.append(batch.fill_next(sys))
    return batches


def exhaustive_state_pairs(states: SampleSet, block: int = 1 << 16):
    """Yield ``(q_idx, r_idx)`` index blocks covering every ordered state pair."""
    N = len(states)
    total = N * N
    for s in range(0, total, block):
        flat = np.arange(s, min(total, s + block))
        yield flat // N, flat % N
