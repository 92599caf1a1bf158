"""Run configuration: flat ``key = value`` files and system construction."""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from deltaiss.dynamics import Box, DiscreteSystem, make_dc_motor, make_scalar_decay
from deltaiss.errors import SchemaError
from deltaiss.sampling import build_epsilon_net
from deltaiss.training import Hyperparams

SYSTEMS = ("scalar", "dcmotor", "external-oracle")
SYSTEM_PARAM_KEYS = ("tau", "a", "Ra", "La", "J", "B", "kb")


def parse_kv(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise SchemaError(f"line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def _vec(v) -> list | None:
    if v is None or isinstance(v, list):
        return v
    return [float(x) for x in str(v).replace(",", " ").split()]


def _vecs(v) -> list | None:
    """``"0.5; 0.1"`` -> ``[[0.5], [0.1]]``."""
    if v is None or isinstance(v, list):
        return v
    return [_vec(part) for part in str(v).split(";") if part.strip()]


@dataclass
class RunConfig:
    system: str | None = None
    system_params: dict = field(default_factory=dict)
    state_lower: list | None = None
    state_upper: list | None = None
    input_lower: list | None = None
    input_upper: list | None = None
    oracle_cmd: str | None = None
    state_radius: float | None = None
    input_radius: float | None = None
    hp: Hyperparams = field(default_factory=Hyperparams)
    lipschitz_seed: int = 0
    lipschitz_batches: int = 100
    lipschitz_batch_size: int = 500
    lipschitz_delta: float = 1e-3
    probe_seed: int = 0
    sim_x0: list | None = None
    sim_inputs: list | None = None
    horizon: int = 200
    refine: int = 0
    oracle_budget: int = 10**8
    out: str = "runs"
    deterministic: bool = True

    @classmethod
    def from_kv(cls, kv: dict) -> "RunConfig":
        own = {f.name for f in fields(cls)} - {"hp", "system_params"}
        hp_keys = {f.name for f in fields(Hyperparams)}
        cfg, hpd, sp = {}, {}, {}
        for k, v in kv.items():
            if k in SYSTEM_PARAM_KEYS:
                sp[k] = float(v)
            elif k in hp_keys:
                hpd[k] = v
            elif k in own:
                cfg[k] = v
            else:
                raise SchemaError(f"unknown config key {k!r}")
        for k in ("state_lower", "state_upper", "input_lower", "input_upper"):
            cfg[k] = _vec(cfg.get(k))
        for k in ("sim_x0", "sim_inputs"):
            cfg[k] = _vecs(cfg.get(k))
        for k in ("state_radius", "input_radius", "lipschitz_delta"):
            if k in cfg:
                cfg[k] = float(cfg[k])
        for k in ("lipschitz_seed", "lipschitz_batches", "lipschitz_batch_size", "probe_seed", "horizon", "refine",
                  "oracle_budget"):
            if k in cfg:
                cfg[k] = int(float(cfg[k]))
        if "deterministic" in cfg:
            cfg["deterministic"] = str(cfg["deterministic"]).lower() in ("1", "true", "yes")
        if cfg.get("system") not in (None, *SYSTEMS):
            raise SchemaError(f"unknown system {cfg['system']!r}; choose from {SYSTEMS}")
        return cls(hp=Hyperparams.from_dict(hpd), system_params=sp, **cfg)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_kv(parse_kv(Path(path).read_text()))

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "hp":
                for k, hv in v.to_dict().items():
                    if hv is not None:
                        lines.append(f"{k} = {_fmt(hv)}")
            elif f.name == "system_params":
                lines.extend(f"{k} = {_fmt(x)}" for k, x in v.items())
            elif v is not None:
                lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def state_box(self, default: Box) -> Box:
        if self.state_lower is None and self.state_upper is None:
            return default
        return Box(self.state_lower or default.lower, self.state_upper or default.upper)

    def input_box(self, default: Box) -> Box:
        if self.input_lower is None and self.input_upper is None:
            return default
        return Box(self.input_lower or default.lower, self.input_upper or default.upper)

    def build_system(self) -> DiscreteSystem:
        if self.system is None:
            raise SchemaError("no system selected (use --system or 'system =' in the config)")
        if self.system == "scalar":
            base = make_scalar_decay(**{k: v for k, v in self.system_params.items() if k in ("tau", "a")})
        elif self.system == "dcmotor":
            base = make_dc_motor(**{k: v for k, v in self.system_params.items() if k != "a"})
        else:
            if not self.oracle_cmd or self.state_lower is None or self.input_lower is None:
                raise SchemaError("external-oracle needs oracle_cmd, state_lower/upper and input_lower/upper")
            sb = Box(self.state_lower, self.state_upper)
            ib = Box(self.input_lower, self.input_upper)
            return DiscreteSystem(sb, ib, ExternalOracle(self.oracle_cmd, sb.dim), name="external-oracle")
        base.state_box = self.state_box(base.state_box)
        base.input_box = self.input_box(base.input_box)
        return base

    def sample_sets(self, sys: DiscreteSystem):
        rx = self.state_radius or self.hp.eps
        ru = self.input_radius or self.hp.eps
        return build_epsilon_net(sys.state_box, rx), build_epsilon_net(sys.input_box, ru)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, (list, tuple)):
        if v and isinstance(v[0], (list, tuple)):
            return "; ".join(_fmt(x) for x in v)
        return " ".join(_fmt(x) for x in v)
    return str(v)


class ExternalOracle:
    """Step oracle backed by a subprocess speaking one line per query.

    Each query writes the state then the input as decimal numbers on one line
    and reads the next state back as one line of numbers.
    """

    def __init__(self, cmd: str, state_dim: int):
        self.cmd = cmd
        self.state_dim = state_dim
        self.proc = None

    def _ensure(self):
        if self.proc is None or self.proc.poll() is not None:
            self.proc = subprocess.Popen(shlex.split(self.cmd), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                         text=True, bufsize=1)

    def __call__(self, X, U):
        self._ensure()
        out = np.empty_like(X)
        for i, (x, u) in enumerate(zip(X, U)):
            self.proc.stdin.write(" ".join(format(v, ".17g") for v in np.r_[x, u]) + "\n")
            self.proc.stdin.flush()
            line = self.proc.stdout.readline()
            vals = line.split()
            if len(vals) != self.state_dim:
                raise SchemaError(f"oracle returned {line!r}, expected {self.state_dim} numbers")
            out[i] = [float(v) for v in vals]
        return out

    def close(self):
        if self.proc is not None:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
            self.proc = None
