"""Command-line front end.

Exit codes: 0 success or certified, 2 not converged or not certified, 1 error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from deltaiss.config import RunConfig
from deltaiss.dynamics import Trajectory, pairwise_gap, simulate
from deltaiss.errors import DeltaISSError
from deltaiss.lipschitz import estimate_system_lipschitz
from deltaiss.network import deserialize, serialize
from deltaiss.training import system_constants, train
from deltaiss.verify import certify, grid_oracle, json_default

log = logging.getLogger("deltaiss")

EXIT_OK, EXIT_ERROR, EXIT_NEGATIVE = 0, 1, 2

DEFAULT_SIM = {
    "scalar": ([[0.5], [0.1]], [[0.43], [0.45]]),
    "dcmotor": ([[0.2, 0.2], [0.0, 0.0]], [[0.17], [0.18]]),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@contextlib.contextmanager
def run_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DeltaISSError(f"run directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _single_thread(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.system:
        cfg.system = args.system
    if args.seed is not None:
        cfg.hp.seed = args.seed
        cfg.lipschitz_seed = args.seed
        cfg.probe_seed = args.seed
    if args.lipschitz_mode:
        cfg.hp.lipschitz_mode = args.lipschitz_mode
    if args.refine is not None:
        cfg.refine = args.refine
    if args.out:
        cfg.out = args.out
    if args.deterministic:
        cfg.deterministic = True
    if cfg.system is None:
        raise UsageError("a system is required: pass --system or set 'system' in the config")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, default=json_default) + "\n")


def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    sys_ = cfg.build_system()
    result = {"system": cfg.system, "mode": cfg.hp.lipschitz_mode}
    for axis in ("state", "input"):
        est = estimate_system_lipschitz(sys_, axis, n_batches=cfg.lipschitz_batches,
                                        batch_size=cfg.lipschitz_batch_size, delta=cfg.lipschitz_delta,
                                        seed=cfg.lipschitz_seed)
        key = "Lx" if axis == "state" else "Lu"
        result[key] = est.select(cfg.hp.lipschitz_mode)
        result[f"{key}_point"] = est.value
        result[f"{key}_ci95"] = est.fit_ci_upper
        result[f"{key}_fit"] = est.to_dict()
    _write_json(out / "lipschitz.json", result)
    print(f"Lx = {result['Lx']:.6g}  Lu = {result['Lu']:.6g}  ({cfg.hp.lipschitz_mode})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    sys_ = cfg.build_system()
    states, inputs = cfg.sample_sets(sys_)
    hp = cfg.hp
    if hp.Lx is None or hp.Lu is None:
        L, hp.Lx, hp.Lu = system_constants(sys_, hp)
    state, report = train(sys_, states, inputs, hp, trace_path=out / "trace.csv")
    (out / "model.txt").write_text(serialize(state.net))
    (out / "config.cfg").write_text(cfg.to_kv())
    rep = report.to_dict()
    rep["eta"] = state.eta
    _write_json(out / "training_report.json", rep)
    print(f"converged={report.converged} eta={state.eta:.6g} epochs={report.epochs_used} "
          f"time={report.wall_time:.1f}s")
    if not report.converged:
        print("training did not converge: no incremental-stability claim is made")
    return EXIT_OK if report.converged else EXIT_NEGATIVE


def cmd_certify(cfg: RunConfig, out: Path, model: Path) -> int:
    sys_ = cfg.build_system()
    net = deserialize(model.read_text(), state_dim=sys_.state_dim)
    states, inputs = cfg.sample_sets(sys_)
    eps = max(states.radius, inputs.radius)
    eta_trained = None
    train_report = model.parent / "training_report.json"
    if train_report.exists():
        tr = json.loads(train_report.read_text())
        eta_trained = tr.get("eta")
        if tr.get("eps") is not None and abs(tr["eps"] - cfg.hp.eps) > 1e-15:
            warnings.warn(f"training used eps={tr['eps']}, certify config has eps={cfg.hp.eps}; "
                          "certifying with the certify-side value")
            print(f"warning: eps mismatch (train {tr['eps']}, certify {cfg.hp.eps}); using certify-side eps",
                  file=sys.stderr)
    L, Lx, Lu = system_constants(sys_, cfg.hp)
    report = certify(net, sys_, states, inputs, cfg.hp.templates, L, eps=eps, budget=cfg.hp.budget,
                     eta_trained=eta_trained)
    report.details.update(Lx=Lx, Lu=Lu, lipschitz_mode=cfg.hp.lipschitz_mode, seeds={
        "train": cfg.hp.seed, "lipschitz": cfg.lipschitz_seed, "probe": cfg.probe_seed})
    if cfg.refine:
        try:
            report.details["grid_oracle"] = grid_oracle(net, sys_, cfg.hp.templates, cfg.refine, budget=cfg.oracle_budget)
        except DeltaISSError as exc:
            report.details["grid_oracle"] = {"skipped": str(exc)}
    (out / "certificate.json").write_text(report.to_json() + "\n")
    print(report.summary())
    return EXIT_OK if report.certified else EXIT_NEGATIVE


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    sys_ = cfg.build_system()
    x0s, us = DEFAULT_SIM.get(cfg.system, (None, None))
    x0s = cfg.sim_x0 or x0s
    us = cfg.sim_inputs or us
    if not x0s or not us:
        raise UsageError("simulate needs sim_x0 and sim_inputs for this system")
    if len(us) == 1:
        us = us * len(x0s)
    trajs = []
    for i, (x0, u) in enumerate(zip(x0s, us)):
        t = simulate(sys_, x0, np.repeat(np.atleast_2d(u), cfg.horizon, axis=0))
        t.to_csv(out / f"trajectory_{i}.csv")
        trajs.append(t)
    if len(trajs) >= 2:
        gap = pairwise_gap(trajs[0], trajs[1])
        with open(out / "gap.csv", "w") as fh:
            fh.write("k,gap\n")
            fh.writelines(f"{k},{g!r}\n" for k, g in enumerate(gap.tolist()))
    print(f"wrote {len(trajs)} trajectories of {cfg.horizon} steps to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path)
    common.add_argument("--system", choices=["scalar", "dcmotor", "external-oracle"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--lipschitz-mode", choices=["point", "ci95"])
    common.add_argument("--refine", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="deltaiss", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("estimate", parents=[common], help="estimate plant Lipschitz constants")
    sub.add_parser("train", parents=[common], help="train a Lyapunov net")
    c = sub.add_parser("certify", parents=[common], help="certify a trained model")
    c.add_argument("--model", type=Path, required=True)
    sub.add_parser("simulate", parents=[common], help="write trajectory CSVs")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        out = Path(cfg.out)
        with run_lock(out), _single_thread(cfg.deterministic):
            if args.command == "estimate":
                return cmd_estimate(cfg, out)
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "certify":
                return cmd_certify(cfg, out, args.model)
            return cmd_simulate(cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (DeltaISSError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
