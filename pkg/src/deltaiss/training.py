"""Losses, exact gradients, optimizers and the training loop for the Lyapunov net."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from deltaiss.dynamics import DiscreteSystem
from deltaiss.errors import BarrierViolation, SchemaError
from deltaiss.lipschitz import KTemplate, composite_L, estimate_system_lipschitz, template_constants
from deltaiss.network import LyapunovNet, assemble_P, logdet_gradient, logdet_P
from deltaiss.sampling import PairBatch, SampleSet, make_pair_batches
from deltaiss.verify import scp_residual

log = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    k1: float = 1e-5
    k2: float = 1.0
    k3: float = 1e-4
    ku: float = 1e-4
    g1: float = 1.0
    g2: float = 1.0
    g3: float = 1.0
    gu: float = 1.0
    c0: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    cl: float = 0.01
    LL: float = 1.5
    eps: float = 0.000177
    n_ep: int = 500
    n_b: int = 10
    batch_size: int = 256
    lr_net: float = 1e-3
    lr_eta: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple = (20,)
    activation: str = "tanh"
    init_scale: float = 0.5
    # plant constants; estimated from the oracle when left unset
    Lx: float | None = None
    Lu: float | None = None
    lipschitz_mode: str = "ci95"
    check_every: int = 50
    budget: int = 10**9

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in (self.hidden if not isinstance(self.hidden, int) else (self.hidden,)))
        for name in ("c0", "c1", "c2", "cl", "LL", "eps", "lr_net", "lr_eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_ep < 0 or self.n_b < 1 or self.batch_size < 1:
            raise ValueError("n_ep must be >= 0, n_b and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")

    @property
    def templates(self) -> tuple:
        return (KTemplate(self.k1, self.g1), KTemplate(self.k2, self.g2), KTemplate(self.k3, self.g3),
                KTemplate(self.ku, self.gu))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise SchemaError(f"unknown hyperparameter {k!r}")
            kw[k] = _coerce(known[k], v)
        return cls(**kw)


def _coerce(f, v):
    if not isinstance(v, str):
        return v
    default = f.default
    if f.name == "hidden":
        return tuple(int(x) for x in v.replace(",", " ").split())
    if v.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        return v.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(float(v))
    if isinstance(default, float) or default is None:
        return float(v)
    return v


# ---------------------------------------------------------------- losses

def _pair_terms(net: LyapunovNet, batch: PairBatch, hp: Hyperparams):
    """Constraint left-hand sides (before subtracting eta) and forward caches."""
    a1, a2, a3, su = hp.templates
    d = np.linalg.norm(batch.xq - batch.xr, axis=1)
    du = np.linalg.norm(batch.uq - batch.ur, axis=1)
    pre_x, post_x, V = net.layers(np.concatenate([batch.xq, batch.xr], axis=1))
    out = {"V": V, "cache_x": (pre_x, post_x), "r0": -V + a1(d), "r1": V - a2(d)}
    if batch.fq is not None:
        pre_f, post_f, VF = net.layers(np.concatenate([batch.fq, batch.fr], axis=1))
        out.update(VF=VF, cache_f=(pre_f, post_f), r2=VF - V + a3(d) - su(du))
    return out


def loss_L0(net, eta, pairs: PairBatch, hp: Hyperparams) -> float:
    return float(np.maximum(0.0, _pair_terms(net, pairs, hp)["r0"] - eta).sum())


def loss_L1(net, eta, pairs: PairBatch, hp: Hyperparams) -> float:
    return float(np.maximum(0.0, _pair_terms(net, pairs, hp)["r1"] - eta).sum())


def loss_L2(net, eta, pairs: PairBatch, hp: Hyperparams) -> float:
    if pairs.fq is None:
        raise ValueError("decrease loss needs successor states; call PairBatch.fill_next first")
    return float(np.maximum(0.0, _pair_terms(net, pairs, hp)["r2"] - eta).sum())


def lyapunov_risk(net, eta, pairs: PairBatch, hp: Hyperparams) -> float:
    t = _pair_terms(net, pairs, hp)
    return float(hp.c0 * np.maximum(0.0, t["r0"] - eta).sum() + hp.c1 * np.maximum(0.0, t["r1"] - eta).sum()
                 + hp.c2 * np.maximum(0.0, t["r2"] - eta).sum())


def loss_P(net: LyapunovNet, hp: Hyperparams) -> float:
    """Log-det barrier ``-cl log det P``; raises BarrierViolation if P is not PD."""
    return -hp.cl * logdet_P(assemble_P(net))


def loss_v(eta: float, L: float, eps: float) -> float:
    return max(0.0, L * eps + eta)


# ---------------------------------------------------------------- parameters

def net_to_params(net: LyapunovNet, eta: float) -> dict:
    p = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        p[f"W{i}"] = W.copy()
        p[f"b{i}"] = b.copy()
    for i, lam in enumerate(net.lambdas):
        p[f"s{i + 1}"] = np.log(lam)
    p["eta"] = np.array([float(eta)])
    return p


def params_to_net(p: dict, template: LyapunovNet) -> LyapunovNet:
    nl = len(template.weights)
    return LyapunovNet([p[f"W{i}"] for i in range(nl)], [p[f"b{i}"] for i in range(nl)],
                       [np.exp(p[f"s{i}"]) for i in range(1, nl)], template.lipschitz_bound, template.activation)


def total_loss(p: dict, template: LyapunovNet, batch: PairBatch, hp: Hyperparams, L: float) -> dict:
    """Every loss component for one batch at parameters ``p``."""
    net = params_to_net(p, template)
    eta = float(p["eta"][0])
    t = _pair_terms(net, batch, hp)
    comps = {"L0": float(np.maximum(0.0, t["r0"] - eta).sum()),
             "L1": float(np.maximum(0.0, t["r1"] - eta).sum()),
             "L2": float(np.maximum(0.0, t["r2"] - eta).sum())}
    comps["LP"] = -hp.cl * logdet_P(assemble_P(net))
    comps["Lv"] = loss_v(eta, L, hp.eps)
    comps["total"] = hp.c0 * comps["L0"] + hp.c1 * comps["L1"] + hp.c2 * comps["L2"] + comps["LP"] + comps["Lv"]
    return comps


def gradients(p: dict, template: LyapunovNet, batch: PairBatch, hp: Hyperparams, L: float):
    """``(components, grads)`` of the total batch loss by reverse accumulation.

    Hinges are differentiated with the active branch taken at the kink.
    """
    net = params_to_net(p, template)
    eta = float(p["eta"][0])
    t = _pair_terms(net, batch, hp)
    m0 = (t["r0"] - eta >= 0).astype(float) * hp.c0
    m1 = (t["r1"] - eta >= 0).astype(float) * hp.c1
    m2 = (t["r2"] - eta >= 0).astype(float) * hp.c2
    dV = -m0 + m1 - m2
    gW, gb = net.backprop(*t["cache_x"], dV)
    gWf, gbf = net.backprop(*t["cache_f"], m2)
    cm = assemble_P(net)
    ldW, ldl = logdet_gradient(net, cm)
    g = {}
    for i in range(len(net.weights)):
        g[f"W{i}"] = gW[i] + gWf[i] - hp.cl * ldW[i]
        g[f"b{i}"] = gb[i] + gbf[i]
    for i, lam in enumerate(net.lambdas):
        g[f"s{i + 1}"] = -hp.cl * ldl[i] * lam
    lv_active = L * hp.eps + eta >= 0
    g["eta"] = np.array([-(m0.sum() + m1.sum() + m2.sum()) + (1.0 if lv_active else 0.0)])
    comps = {"L0": float(np.maximum(0.0, t["r0"] - eta).sum()),
             "L1": float(np.maximum(0.0, t["r1"] - eta).sum()),
             "L2": float(np.maximum(0.0, t["r2"] - eta).sum()),
             "LP": -hp.cl * logdet_P(cm), "Lv": loss_v(eta, L, hp.eps)}
    comps["total"] = hp.c0 * comps["L0"] + hp.c1 * comps["L1"] + hp.c2 * comps["L2"] + comps["LP"] + comps["Lv"]
    return comps, g


# ---------------------------------------------------------------- optimizers

class Adam:
    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lrs = lrs
        self.beta1, self.beta2, self.epsilon = beta1, beta2, epsilon
        self.m, self.v, self.t = {}, {}, 0

    def direction(self, grads: dict) -> dict:
        """Advance the moments and return the step to subtract from each parameter."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            out[k] = self.lrs[k] * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.epsilon)
        return out


class SGD:
    def __init__(self, lrs: dict):
        self.lrs = lrs

    def direction(self, grads: dict) -> dict:
        return {k: self.lrs[k] * g for k, g in grads.items()}


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    net: LyapunovNet
    eta: float
    optimizer: object = None
    epoch: int = 0
    trace: list = field(default_factory=list)


@dataclass
class TrainingReport:
    converged: bool
    final_eta: float
    final_losses: dict
    epochs_used: int
    wall_time: float
    L: float
    Lx: float
    Lu: float
    eps: float
    rejected_steps: int = 0
    full_check: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def system_constants(sys: DiscreteSystem, hp: Hyperparams):
    """``(L, Lx, Lu)`` for the validity condition; plant constants estimated if unset."""
    Lx, Lu = hp.Lx, hp.Lu
    if Lx is None:
        Lx = estimate_system_lipschitz(sys, "state", seed=hp.seed).select(hp.lipschitz_mode)
    if Lu is None:
        Lu = estimate_system_lipschitz(sys, "input", seed=hp.seed).select(hp.lipschitz_mode)
    L1, L2, L3, Lsu = template_constants(hp.templates, sys.state_box.diameter, sys.input_box.diameter)
    return composite_L(hp.LL, Lx, Lu, L1, L2, L3, Lsu), Lx, Lu


def full_set_check(net: LyapunovNet, eta: float, states: SampleSet, inputs: SampleSet, sys: DiscreteSystem,
                   hp: Hyperparams, L: float) -> dict:
    """Convergence test on the whole data set: zero risk, zero validity loss, non-positive barrier."""
    cm = assemble_P(net)
    out = {"LP": -hp.cl * cm.logdet if cm.pd else float("inf"), "Lv": loss_v(eta, L, hp.eps)}
    out["eta_star"], _, info = scp_residual(net, states, inputs, sys, hp.templates, budget=hp.budget, L=L,
                                           skip_decrease_above=eta)
    out["decrease_skipped"] = bool(info.get("decrease_skipped", False))
    out["risk_zero"] = out["eta_star"] <= eta and not out["decrease_skipped"]
    out["passed"] = bool(out["risk_zero"] and out["Lv"] == 0 and out["LP"] <= 0)
    return out


def train(sys: DiscreteSystem, states: SampleSet, inputs: SampleSet, hp: Hyperparams, L: float | None = None,
          net: LyapunovNet | None = None, trace_path=None):
    """Fit the net and eta until the full-set convergence test passes or epochs run out.

    Returns ``(TrainState, TrainingReport)``. A non-converged report carries
    no stability claim.
    """
    t0 = time.perf_counter()
    for name, ss in (("state", states), ("input", inputs)):
        if ss.radius > hp.eps * (1 + 1e-12):
            raise ValueError(f"{name} samples have covering radius {ss.radius} > eps {hp.eps}")
    if L is None:
        L, Lx, Lu = system_constants(sys, hp)
    else:
        Lx, Lu = hp.Lx or float("nan"), hp.Lu or float("nan")
    if net is None:
        net = LyapunovNet.initialize(sys.state_dim, list(hp.hidden), hp.LL, seed=hp.seed, activation=hp.activation,
                                     scale=hp.init_scale)
    if not assemble_P(net).pd:
        raise BarrierViolation("initial certificate matrix is not positive definite; "
                               "shrink the initial weights and biases")
    p = net_to_params(net, 0.0)
    lrs = {k: (hp.lr_eta if k == "eta" else hp.lr_net) for k in p}
    opt = Adam(lrs) if hp.optimizer == "adam" else SGD(lrs)
    batches = make_pair_batches(states, inputs, sys, hp.n_b, hp.batch_size, hp.seed)
    state = TrainState(net, 0.0, opt)
    rejected = 0
    converged = False
    last = {"L0": 0.0, "L1": 0.0, "L2": 0.0, "LP": -hp.cl * assemble_P(net).logdet, "Lv": loss_v(0.0, L, hp.eps)}
    check = {}
    for epoch in range(hp.n_ep):
        sums = dict.fromkeys(("L0", "L1", "L2", "LP", "Lv"), 0.0)
        for batch in batches:
            comps, g = gradients(p, net, batch, hp, L)
            for k in sums:
                sums[k] += comps[k]
            step = opt.direction(g)
            scale = 1.0
            for _ in range(40):
                trial = {k: p[k] - scale * step[k] for k in p}
                if assemble_P(params_to_net(trial, net)).pd:
                    p = trial
                    break
                scale *= 0.5
                rejected += 1
        state.epoch = epoch + 1
        state.eta = float(p["eta"][0])
        state.net = params_to_net(p, net)
        state.trace.append({"epoch": epoch + 1, **sums, "eta": state.eta})
        last = sums
        if (epoch + 1) % hp.check_every == 0 or epoch + 1 == hp.n_ep:
            check = full_set_check(state.net, state.eta, states, inputs, sys, hp, L)
            log.info("epoch %d: eta=%.6g eta*=%.6g passed=%s", epoch + 1, state.eta, check["eta_star"],
                     check["passed"])
            if check["passed"]:
                converged = True
                break
    state.net = params_to_net(p, net)
    state.eta = float(p["eta"][0])
    if trace_path is not None:
        write_trace(state.trace, trace_path)
    report = TrainingReport(converged=converged, final_eta=state.eta,
                            final_losses={"L": hp.c0 * last["L0"] + hp.c1 * last["L1"] + hp.c2 * last["L2"],
                                          "LP": last["LP"], "Lv": last["Lv"]},
                            epochs_used=state.epoch, wall_time=time.perf_counter() - t0, L=float(L), Lx=float(Lx),
                            Lu=float(Lu), eps=hp.eps, rejected_steps=rejected, full_check=check)
    return state, report


def write_trace(trace: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "L0", "L1", "L2", "LP", "Lv", "eta"])
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in ("L0", "L1", "L2", "LP", "Lv", "eta")])
