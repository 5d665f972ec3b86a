"""Command-line front end.

Every subcommand prints JSON records (one per line) on stdout. Exit codes:
0 ok, 1 audit found a violation, 2 bad input, 3 infeasible budget, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Any

import numpy as np

from . import channel, graph, pipeline
from .bounds import PerturbationBall, concretize, propagate_bounds, robustness_bound
from .fbl import LinkParams
from .ratesolver import (
    BisectionError,
    InfeasibleError,
    LinkConstants,
    ModalityLink,
    convexity_audit,
    f_tau,
    solve_bisection,
)

EXIT_OK, EXIT_AUDIT, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_IO = 0, 1, 2, 3, 4
COMMANDS = ("model", "bound", "importance", "solve", "simulate", "sweep", "audit")


class InputError(ValueError):
    pass


class OutputError(OSError):
    pass


def _jsonable(x: Any):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.generic):
        return x.item()
    return x


def _emit(record: dict, out=None) -> None:
    out = sys.stdout if out is None else out
    out.write(json.dumps(_jsonable(record), sort_keys=False) + "\n")


def _parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise InputError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    return doc


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from exc


# -- configuration -------------------------------------------------------------


def _raw_config(args) -> dict:
    doc = _read_json(args.config) if args.config else {}
    for item in args.overrides:
        k, v = _parse_override(item)
        doc[k] = v
    return doc


def experiment_config(args, extra: tuple[str, ...] = ()):
    """Defaults, then the config file, then key=value overrides, then flags.

    Keys listed in ``extra`` are split off and returned alongside the config.
    """
    doc = _raw_config(args)
    extras = {k: doc.pop(k) for k in extra if k in doc}
    flags = {
        "master_seed": args.seed,
        "delta0": args.delta0,
        "blocklength": args.blocklength,
        "bits": args.bits,
        "tol": args.tol,
        "jobs": args.jobs,
    }
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.snr_db is not None:
        doc["snr_db"] = _floats(args.snr_db)
    if args.scheme is not None:
        doc["schemes"] = [s.strip() for s in args.scheme.split(",")]
    if args.freeze_kappa:
        doc["freeze_kappa"] = True
    try:
        cfg = pipeline.ExperimentConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad experiment config: {exc}") from exc
    return (cfg, extras) if extra else cfg


def _load_graph(spec) -> graph.CompGraph:
    try:
        if isinstance(spec, str):
            try:
                with open(spec, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                raise OutputError(f"cannot read model {spec}: {exc}") from exc
            obj = graph.loads(text)
        elif isinstance(spec, dict):
            obj = graph.loads(json.dumps(spec))
        else:
            raise InputError("'model' must be a path or an inline graph document")
    except graph.GraphError as exc:
        raise InputError(f"invalid model: {exc}") from exc
    return obj.decoder if isinstance(obj, graph.ToyFusionModel) else obj


def _ball_problem(args):
    doc = _raw_config(args)
    if "model" not in doc:
        raise InputError("config needs a 'model' entry")
    spec = doc["model"]
    if isinstance(spec, str) and args.config and not os.path.isabs(spec):
        spec = os.path.join(os.path.dirname(os.path.abspath(args.config)), spec)
    g = _load_graph(spec)
    M = len(g.modalities)
    center = doc.get("center")
    if center is None:
        raise InputError("config needs a 'center' entry (one list per modality)")
    try:
        center = [np.asarray(u, dtype=np.float64).reshape(-1) for u in center]
        if "radius" in doc:
            radii = [float(doc["radius"])] * M
        else:
            radii = [float(r) for r in doc.get("radii", [2.0 ** -(args.bits or 8)] * M)]
        p = doc.get("p", "inf")
        p = math.inf if str(p).lower() == "inf" else float(p)
        ball = PerturbationBall(p, tuple(radii))
        if [u.shape[0] for u in center] != g.input_dims:
            raise InputError(f"center dims {[u.shape[0] for u in center]} != model input dims {g.input_dims}")
        bounds = propagate_bounds(g, center, ball)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return g, center, ball, bounds


# -- subcommands ---------------------------------------------------------------


def cmd_model(args) -> int:
    cfg = experiment_config(args)
    task = pipeline.build_task(cfg)
    m = task.model
    rec = {
        "command": "model",
        "checksum": graph.weight_checksum(m.decoder),
        "feature_dims": m.feature_dims,
        "raw_dims": m.raw_dims,
        "train_loss": m.metadata.get("train_loss"),
    }
    if args.out:
        _write(args.out, graph.dumps(m))
        rec["path"] = args.out
    _emit(rec)
    return EXIT_OK


def cmd_bound(args) -> int:
    _, center, ball, bounds = _ball_problem(args)
    rep = robustness_bound(bounds, ball)
    lo, hi = concretize(bounds, ball, center)
    rec = {"command": "bound", **rep.to_dict(), "box": {"lower": lo, "upper": hi}}
    _emit(rec)
    if args.out:
        _write(args.out, json.dumps(_jsonable(rec)) + "\n")
    return EXIT_OK


def cmd_importance(args) -> int:
    _, _, ball, bounds = _ball_problem(args)
    rep = robustness_bound(bounds, ball)
    rec = {"command": "importance", "p": _jsonable(ball.p), "kappa": rep.kappa}
    _emit(rec)
    if args.out:
        _write(args.out, json.dumps(_jsonable(rec)) + "\n")
    return EXIT_OK


def _solve_links(doc: dict, args):
    try:
        if "links" in doc:
            return [LinkConstants(float(l["a"]), float(l["b"]), float(l["k"]), float(l["D"])) for l in doc["links"]]
        B = int(args.bits if args.bits is not None else doc.get("bits", 8))
        L = int(args.blocklength if args.blocklength is not None else doc.get("blocklength", 256))
        kappa = [float(k) for k in doc["kappa"]]
        D = [int(d) for d in doc["D"]]
        if args.snr_db is not None:
            snr_db = _floats(args.snr_db)
        elif "snr_db" in doc:
            snr_db = doc["snr_db"]
            snr_db = [float(snr_db)] * len(kappa) if np.isscalar(snr_db) else [float(s) for s in snr_db]
        else:
            raise InputError("solve config needs 'snr_db' (or raw 'links')")
        if len(snr_db) == 1:
            snr_db = snr_db * len(kappa)
        if not len(kappa) == len(D) == len(snr_db):
            raise InputError("kappa, D and snr_db must have one entry per modality")
        return [
            ModalityLink(d, k, LinkParams.from_snr(10.0 ** (s / 10.0), L), B)
            for k, d, s in zip(kappa, D, snr_db)
        ]
    except KeyError as exc:
        raise InputError(f"solve config is missing {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc


def cmd_solve(args) -> int:
    doc = _raw_config(args)
    links = _solve_links(doc, args)
    delta0 = float(args.delta0 if args.delta0 is not None else doc.get("delta0", 1e-3))
    tol = float(args.tol if args.tol is not None else doc.get("tol", 1e-6))
    max_iter = int(doc.get("max_iter", 200))
    if not delta0 > 0 or not tol > 0:
        raise InputError("delta0 and tol must be positive")
    sol = solve_bisection(links, delta0, tol, max_iter)
    rec = {"command": "solve", "delta0": delta0, "tol": tol, **sol.to_dict()}
    _emit(rec)
    if args.out:
        _write(args.out, json.dumps(_jsonable(rec)) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    """One trial (``trial=N`` override, default 0) at each SNR in the config."""
    cfg, extra = experiment_config(args, extra=("trial",))
    trial = int(extra.get("trial", 0))
    task = pipeline.build_task(cfg)
    lines = []
    for snr_db in cfg.snr_db:
        sample = pipeline.draw_sample(task, cfg, trial)
        states = channel.draw_states(cfg.fading, snr_db, cfg.blocklength, cfg.master_seed, trial, cfg.M)
        kappa = pipeline.importance(task.model, sample.features, cfg)
        for scheme in cfg.schemes:
            r = pipeline.run_scheme(scheme, task.model, sample, states, cfg, snr_db, kappa)
            rec = {"command": "simulate", **r.to_dict()}
            lines.append(json.dumps(_jsonable(rec)))
            _emit(rec)
    if args.out:
        _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    if not args.out:
        raise InputError("sweep needs --out for the CSV file")
    result = pipeline.snr_sweep(cfg)
    _write(args.out, result.to_csv())
    for s in result.summary():
        _emit({"command": "sweep", **s})
    for f in result.failures:
        print(json.dumps({"command": "sweep", "failure": f}), file=sys.stderr)
    return EXIT_OK


def cmd_audit(args) -> int:
    """Solver, convexity and end-to-end checks on a config; exit 1 on any violation."""
    cfg = experiment_config(args)
    task = pipeline.build_task(cfg)
    sample = pipeline.draw_sample(task, cfg, 0)
    kappa = pipeline.importance(task.model, sample.features, cfg)
    ok = True
    for snr_db in cfg.snr_db:
        states = channel.draw_states(cfg.fading, snr_db, cfg.blocklength, cfg.master_seed, 0, cfg.M)
        links = [ModalityLink(d * cfg.bits, k, s.link(), cfg.bits)
                 for d, k, s in zip(task.model.feature_dims, kappa, states)]
        conv = convexity_audit(links, 1000, delta0=cfg.delta0)
        sol = solve_bisection(links, cfg.delta0, cfg.tol, cfg.max_iter)
        grid = np.linspace(0.0, sol.bracket[1], 1000)
        fs = [f_tau(links, cfg.delta0, float(t)) for t in grid]
        monotone = all(b >= a for a, b in zip(fs, fs[1:]))
        delays = [l.D / r for l, r in zip(links, sol.rates)]
        equal_delay = max(delays) - min(delays) <= 1e-9 * max(delays)
        rec = {"command": "audit", "check": "solver", "snr_db": snr_db, "convexity": conv.to_dict(),
               "f_monotone": monotone, "equal_delay": equal_delay, "tau_star": sol.tau_star}
        ok &= conv.convex and monotone and equal_delay
        _emit(rec)
    sweep = pipeline.snr_sweep(cfg)
    viol = sum(1 for r in sweep.results if r.deviation > r.gamma_realized)
    delay_viol = sum(
        1 for r in sweep.select("adaptive")
        if max(d / x for d, x in zip(r.bits, r.rates)) - min(d / x for d, x in zip(r.bits, r.rates)) > 1e-9 * r.delay
    )
    ok &= viol == 0 and delay_viol == 0
    _emit({"command": "audit", "check": "end_to_end", "trials": len(sweep.results),
           "soundness_violations": viol, "delay_violations": delay_viol, "failures": len(sweep.failures),
           "ok": ok})
    return EXIT_OK if ok else EXIT_AUDIT


HANDLERS = {
    "model": cmd_model, "bound": cmd_bound, "importance": cmd_importance, "solve": cmd_solve,
    "simulate": cmd_simulate, "sweep": cmd_sweep, "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semrate", description="Importance-aware rate allocation for multi-modal feature links.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides, JSON-parsed when possible")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output path")
    p.add_argument("--seed", type=int, help="master seed for channel and sample streams")
    p.add_argument("--snr-db", help="SNR in dB; comma-separated for a grid")
    p.add_argument("--delta0", type=float, help="output distortion budget")
    p.add_argument("--blocklength", type=int, help="channel blocklength L")
    p.add_argument("--bits", type=int, help="quantization bits B")
    p.add_argument("--scheme", help="comma-separated subset of adaptive,fixed,errorfree")
    p.add_argument("--tol", type=float, help="bisection tolerance")
    p.add_argument("--jobs", type=int, help="worker threads for sweeps")
    p.add_argument("--freeze-kappa", action="store_true", help="reuse one calibration importance for all trials")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    try:
        return HANDLERS[args.command](args)
    except InfeasibleError as exc:
        r = exc.report
        print(json.dumps({"error": "infeasible", "delta0": r.delta0, "half_sum_a": r.half_sum_a,
                          "zero_rate_mass": r.f_at_zero + r.delta0, "violations": r.violations}), file=sys.stderr)
        return EXIT_INFEASIBLE
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InputError, graph.GraphError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BisectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
