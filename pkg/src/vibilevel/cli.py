"""Experiment runner: ``run``, ``verify``, ``sweep`` and ``list-instances``.

Config files are flat ``key: value`` text, one key per line, ``#`` starts a
comment.  Vectors are comma-separated; integer lists also accept ``lo..hi``.
See the README for the full key table.

Exit codes: 0 success, 1 configuration error, 2 solver abort, 3 a measured
error exceeds its bound by more than the tolerated margin.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInput, VIError
from .model import check_outer_gradients, check_strong_monotonicity
from .oracle import verify_bounds
from .outer import OuterConfig, run
from .problems import CATALOG, all_entries, get_instance

log = logging.getLogger("vibilevel")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_BOUND = 0, 1, 2, 3

TRACE_HEADER = ["k", "f_value", "hypergrad_norm_sq", "dgap_final", "inner_iters", "oracle_err"]
VERIFY_HEADER = ["T", "itd_fd_abs_err", "itd_fd_rel_err", "prop1_bound", "lemma6_envelope_ok"]
SWEEP_HEADER = ["axis_value", "min_grad_norm_sq", "scaled_product"]
SWEEP_AXES = ("K", "T", "beta")
GRADIENT_MEASURES = ("hypergrad", "true", "mapping")


class ConfigError(Exception):
    pass


def fmt(v) -> str:
    """Round-trip safe text for a number; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


@dataclass
class RunConfig:
    instance: str = "scalar_clamp"
    dim: Optional[int] = None
    x0: object = "center"
    K: int = 100
    T: int = 30
    beta: object = "auto"
    a: float = 1.0
    b: float = 2.0
    seed: int = 0
    oracle_every: int = 0
    output_path: Optional[str] = None
    inner_tol: float = 1e-12
    T_values: List[int] = field(default_factory=lambda: list(range(1, 51)))
    sweep_axis: str = "K"
    sweep_values: List[float] = field(default_factory=list)
    gradient_measure: str = "hypergrad"

    def outer_config(self, **overrides) -> OuterConfig:
        beta = None if self.beta == "auto" else float(self.beta)
        kw = dict(K=self.K, T=self.T, beta=beta, inner_tol=self.inner_tol,
                  oracle_every=self.oracle_every, seed=self.seed,
                  track_true_grad=self.gradient_measure == "true")
        kw.update(overrides)
        return OuterConfig(**kw)


def _int_list(text):
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    return out


def _float_list(text):
    return [float(p) for p in text.split(",") if p.strip()]


def _vector_or_center(text):
    return "center" if text.strip() == "center" else _float_list(text)


def _scalar_or_auto(text):
    return "auto" if text.strip() == "auto" else float(text)


def _optional_int(text):
    return None if text.strip() in ("", "none") else int(text)


PARSERS = {
    "instance": str.strip, "dim": _optional_int, "x0": _vector_or_center, "K": int, "T": int,
    "beta": _scalar_or_auto, "a": float, "b": float, "seed": int, "oracle_every": int,
    "output_path": str.strip, "inner_tol": float, "T_values": _int_list,
    "sweep_axis": str.strip, "sweep_values": _float_list, "gradient_measure": str.strip,
}
assert set(PARSERS) == {f.name for f in fields(RunConfig)}


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value'")
        key, value = (s.strip() for s in line.split(":", 1))
        if key not in PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return RunConfig(**values)


def load_config(path, seed=None, out=None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config(text)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output_path = out
    return cfg


def build_instance(cfg: RunConfig):
    """Instance and starting point for ``cfg``, validated before any solve."""
    if not (0 < cfg.a < cfg.b):
        raise ConfigError(f"D-gap parameters must satisfy 0 < a < b (got a={cfg.a}, b={cfg.b})")
    if cfg.K < 0 or cfg.T < 1:
        raise ConfigError("K must be >= 0 and T >= 1")
    if cfg.beta != "auto" and not cfg.beta > 0:
        raise ConfigError("beta must be positive or 'auto'")
    if cfg.oracle_every < 0:
        raise ConfigError("oracle_every must be >= 0")
    if cfg.gradient_measure not in GRADIENT_MEASURES:
        raise ConfigError(f"gradient_measure must be one of {GRADIENT_MEASURES}")
    if cfg.instance not in CATALOG:
        raise ConfigError(f"unknown instance {cfg.instance!r}; try list-instances")
    try:
        spec = get_instance(cfg.instance, cfg.seed, cfg.dim).spec.with_dgap(cfg.a, cfg.b)
        check_strong_monotonicity(spec, seed=cfg.seed)
        check_outer_gradients(spec, seed=cfg.seed)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if isinstance(cfg.x0, str):
        x0 = spec.set_x.center()
    else:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (spec.dim_x,):
            raise ConfigError(f"x0 needs {spec.dim_x} entries, got {x0.size}")
    return spec, x0


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _write_meta(path: Path, payload):
    def clean(o):
        # strict JSON: arrays to lists, non-finite floats to null
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple, np.ndarray)):
            return [clean(v) for v in o]
        if isinstance(o, np.generic):
            o = o.item()
        if isinstance(o, float) and not np.isfinite(o):
            return None
        return o

    meta = Path(str(path) + ".meta")
    meta.write_text(json.dumps(clean(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _out_path(cfg: RunConfig, command: str) -> Path:
    return Path(cfg.output_path or f"{cfg.instance}_{command}.csv")


def cmd_run(cfg: RunConfig) -> int:
    spec, x0 = build_instance(cfg)
    trace = run(spec, x0, cfg.outer_config())
    out = _out_path(cfg, "run")
    _write_csv(out, TRACE_HEADER, [
        (r.k, r.f_value, r.hypergrad_norm_sq, r.dgap_final, r.inner_iters_used, r.oracle_err)
        for r in trace.records])
    last = trace.records[-1] if trace.records else None
    _write_meta(out, {
        "command": "run", "config": asdict(cfg), "beta": trace.beta,
        "L_f_hat": trace.L_f_hat, "L_S_hat": trace.L_S_hat, "error": trace.error,
        "final_x": None if last is None else last.x,
        "min_grad_norm_sq": trace.min_grad_norm_sq,
        "min_mapping_norm_sq": trace.min_mapping_norm_sq,
    })
    log.info("beta=%s, %d records written to %s", fmt(trace.beta), len(trace.records), out)
    if trace.error:
        print(f"solver abort: {trace.error}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    spec, x0 = build_instance(cfg)
    if not cfg.T_values:
        raise ConfigError("T_values is empty")
    report = verify_bounds(spec, x0, cfg.T_values, seed=cfg.seed, outer_K=cfg.K,
                           outer_T=cfg.T)
    out = _out_path(cfg, "verify")
    _write_csv(out, VERIFY_HEADER, [
        (r.T, r.itd_fd_abs_err, r.itd_fd_rel_err, r.prop1_bound, r.lemma6_envelope_ok)
        for r in report.rows])
    _write_meta(out, {
        "command": "verify", "config": asdict(cfg), "x": report.x,
        "constants": report.constants.as_dict(), "bound_status": report.bound_status,
        "row_status": {r.T: r.prop1_status for r in report.rows},
        "theorem_check": report.thm2, "notes": report.notes,
    })
    for name, status in report.bound_status.items():
        if status != "ok":
            log.warning("%s bound: %s", name, status)
    if report.hard_failure:
        print("measured error exceeds its bound beyond the 5% margin: "
              + ", ".join(k for k, v in report.bound_status.items() if v == "violated"),
              file=sys.stderr)
        return EXIT_BOUND
    return EXIT_OK


def _measure(trace, measure):
    if measure == "true":
        return trace.min_true_grad_norm_sq
    if measure == "mapping":
        return trace.min_mapping_norm_sq
    return trace.min_grad_norm_sq


def _sweep_one(spec, x0, cfg: RunConfig, value):
    if cfg.sweep_axis == "beta":
        oc = cfg.outer_config(beta=float(value))
    else:
        oc = cfg.outer_config(**{cfg.sweep_axis: int(value)})
    trace = run(spec, x0, oc)
    m = _measure(trace, cfg.gradient_measure)
    return value, m, (len(trace.records) - 1) * m, trace.error


def cmd_sweep(cfg: RunConfig, workers: int | None = None) -> int:
    if cfg.sweep_axis not in SWEEP_AXES:
        raise ConfigError(f"sweep_axis must be one of {SWEEP_AXES}")
    if not cfg.sweep_values:
        raise ConfigError("sweep_values is empty")
    if cfg.sweep_axis in ("K", "T") and any(v != int(v) for v in cfg.sweep_values):
        raise ConfigError(f"sweep values for {cfg.sweep_axis} must be integers")
    spec, x0 = build_instance(cfg)
    values = sorted(set(cfg.sweep_values))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda v: _sweep_one(spec, x0, cfg, v), values))
    out = _out_path(cfg, "sweep")
    _write_csv(out, SWEEP_HEADER, [(int(v) if cfg.sweep_axis != "beta" else v, m, p)
                                   for v, m, p, _ in results])
    errors = {fmt(v): e for v, _, _, e in results if e}
    _write_meta(out, {"command": "sweep", "config": asdict(cfg), "errors": errors})
    if errors:
        print(f"solver abort in sweep: {errors}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_list(seed=0) -> int:
    for e in all_entries(seed):
        s = e.spec
        print(f"{e.name:16s} dim_y={s.dim_y} dim_x={s.dim_x} "
              f"[{', '.join(sorted(e.regime_tags))}] {e.notes}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibilevel",
        description="Bilevel solver with a strongly monotone VI inner level.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "outer projected-gradient run, one CSV row per iterate"),
                        ("verify", "ITD error and bound checks per inner step count"),
                        ("sweep", "rerun along K, T or beta and record min grad-norm^2")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="key: value config file")
        p.add_argument("--out", help="output CSV path (overrides output_path)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    p = sub.add_parser("list-instances", help="print the instance catalog")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-instances":
        return cmd_list(args.seed)
    commands = {"run": cmd_run, "verify": cmd_verify, "sweep": cmd_sweep}
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return commands[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VIError as exc:
        print(f"solver abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
