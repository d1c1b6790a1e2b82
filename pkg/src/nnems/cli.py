"""Command-line driver: pv-fit, dataset, train, simulate, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DatasetError, generate, read_dataset, split, summarize
from .netmodel import NetworkError, data_path, default_network, load_network
from .neural import ModelError, TrainingError, load_model, save_model, train_decentralized, train_lm
from .opf import SocFault
from .powerflow import PowerFlowError
from .profiles import PanelCurve, ProfileError, fit_panel, load_profile, synthesize_profile
from .simloop import (CentralizedController, DecentralizedController, FixedController, ScenarioError,
                      TimelineMismatch, bundled_scenario, compare, load_scenario, read_trace, run)
from .svgplot import figure, trace_panels

log = logging.getLogger("nnems")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    params: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    tool_version: str = __version__
    wall_time_s: float = 0.0

    def add_input(self, path: Path | None):
        if path is not None:
            self.inputs[str(path)] = _sha256(Path(path))

    def write(self, out_dir: Path, name: str, text: str) -> Path:
        path = out_dir / name
        write_atomic(path, text)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()
        return path

    def finish(self, out_dir: Path, started: float) -> Path:
        self.wall_time_s = round(time.perf_counter() - started, 3)
        path = out_dir / f"{self.command}.manifest.json"
        write_atomic(path, json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path


def _read_text(path: str | Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from exc


def _network(arg: str | None):
    return default_network() if arg is None else load_network(_read_text(arg))


def _say(args, msg: str):
    if not args.quiet:
        print(msg)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n"


# Commands ------------------------------------------------------------------------

def cmd_pv_fit(args, man: RunManifest):
    path = Path(args.curve) if args.curve else None
    text = _read_text(path) if path else data_path("panel_spr305e.csv").read_text()
    man.add_input(path)
    curve = PanelCurve.from_csv(text)
    problems = curve.check()
    if problems:
        raise ProfileError("; ".join(problems))
    c1, c2 = fit_panel(curve)
    resid = curve.p_panel - (c1 * curve.irr + c2)
    report = {"c1": c1, "c2": c2, "sse": float(resid @ resid), "max_abs_residual_w": float(np.max(np.abs(resid))),
              "residuals_w": resid.tolist(), "samples": int(len(curve.irr))}
    man.write(args.out_dir, "pv_fit.json", _json(report))
    _say(args, f"c1 = {c1:.6f} W/(W/m^2)\nc2 = {c2:.6f} W\nmax |residual| = {report['max_abs_residual_w']:.4f} W")


def cmd_dataset(args, man: RunManifest):
    mg = _network(args.network)
    man.add_input(Path(args.network) if args.network else None)
    if args.profile:
        profile = load_profile(_read_text(args.profile), args.dt if args.resample else None)
        man.add_input(Path(args.profile))
    else:
        profile = synthesize_profile(args.days, args.dt, args.seed)
    banded = not args.fixed_bounds

    def progress(k, n):
        if not args.quiet and (k % 1000 == 0 or k == n):
            print(f"  step {k}/{n}", file=sys.stderr)

    ds = generate(mg, profile, None, banded, high_load_band=args.high_load_band, seed=args.seed,
                  progress=progress)
    s = summarize(ds)
    name = args.out
    man.write(args.out_dir, name, ds.to_csv())
    man.write(args.out_dir, Path(name).stem + ".meta.json", _json(ds.metadata))
    diag = {
        "rows": s["rows"], "feasible_rows": s["feasible_rows"],
        "corr_f_vs_sum_p_inv": s["corr_f_p_inv"],
        "frac_f_within_0.002_of_0.99": s["frac_f_near_floor"],
        "droop_effect_lost": s["droop_lost"],
        "f_n_summary": {"min": np.min([r.f_n for r in ds.rows], axis=0).tolist(),
                        "max": np.max([r.f_n for r in ds.rows], axis=0).tolist(),
                        "std": s["std"]["f_n"]},
        "summary": s,
    }
    man.write(args.out_dir, Path(name).stem + ".droop.json", _json(diag))
    _say(args, f"{len(ds)} rows ({s['feasible_rows']} feasible) -> {args.out_dir / name}")
    _say(args, f"corr(f, sum p_inv) = {s['corr_f_p_inv']:.4f}; f near 0.99: {100 * s['frac_f_near_floor']:.1f}%")
    if s["droop_lost"]:
        _say(args, "droop effect lost: frequency clusters at the lower bound")


def _fractions(text: str) -> tuple[float, ...]:
    try:
        fr = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --fractions {text!r}") from exc
    if len(fr) != 3 or any(v < 0 for v in fr) or not np.isclose(sum(fr), 1.0):
        raise UsageError("--fractions must be three nonnegative numbers summing to 1")
    return fr


def cmd_train(args, man: RunManifest):
    fractions = _fractions(args.fractions)
    path = Path(args.dataset)
    ds = read_dataset(_read_text(path))
    man.add_input(path)
    good = ds.feasible()
    if len(good) < 10:
        raise DatasetError(f"dataset too small: {len(good)} feasible rows")
    tr, va, te = split(ds, fractions, args.seed)
    pairs = [p.inputs_targets() if len(p) else None for p in (tr, va, te)]
    norm = good.inputs_targets()
    if args.decentralized:
        reports = {}
        for i in range(ds.n_dg):
            model, rep = train_decentralized(pairs[0], pairs[1], i, args.hidden, args.seed, test=pairs[2],
                                             norm_data=norm, max_epochs=args.epochs)
            man.write(args.out_dir, f"{args.out_stem}_dg{i + 1}.json", save_model(model))
            reports[f"dg{i + 1}"] = rep.to_dict()
            _say(args, _report_line(f"DG {i + 1}", rep.to_dict()))
        man.write(args.out_dir, f"{args.out_stem}_decentralized.report.json", _json(reports))
    else:
        model, rep = train_lm(pairs[0], pairs[1], args.hidden, args.seed, test=pairs[2], norm_data=norm,
                              max_epochs=args.epochs)
        man.write(args.out_dir, f"{args.out_stem}.json", save_model(model))
        man.write(args.out_dir, f"{args.out_stem}.report.json", _json(rep.to_dict()))
        _say(args, _report_line("centralized", rep.to_dict()))


def _report_line(tag: str, rep: dict) -> str:
    parts = [f"{tag}: {rep['epochs']} epochs ({rep['stop_reason']})"]
    for name in ("train", "val", "test"):
        if name in rep["mse"]:
            rs = ", ".join(f"{r:.6f}" for r in rep["r"][name])
            parts.append(f"{name} MSE {rep['mse'][name]:.3e} R [{rs}]")
    return "; ".join(parts)


def _scenario(arg: str):
    if Path(arg).is_file():
        return load_scenario(_read_text(arg)), Path(arg)
    try:
        return bundled_scenario(arg), None
    except FileNotFoundError as exc:
        raise ScenarioError(f"no scenario file or bundled scenario named {arg!r}") from exc


def _controller(arg: str, scenario, mg, man: RunManifest):
    if arg == "fixed":
        return FixedController(np.full(mg.n_dg, mg.freq_to_pu(scenario.fixed_f_n_hz)))
    p = Path(arg)
    if p.is_dir():
        files = sorted(p.glob("*_dg*.json"), key=lambda f: int(f.stem.rsplit("_dg", 1)[1]))
        if len(files) != mg.n_dg:
            raise ModelError(f"expected {mg.n_dg} per-DG model files in {p}, found {len(files)}")
        for f in files:
            man.add_input(f)
        return DecentralizedController([load_model(_read_text(f)) for f in files])
    man.add_input(p)
    return CentralizedController(load_model(_read_text(p)))


def cmd_simulate(args, man: RunManifest):
    mg = _network(args.network)
    man.add_input(Path(args.network) if args.network else None)
    scenario, spath = _scenario(args.scenario)
    man.add_input(spath)
    ctrl = _controller(args.controller, scenario, mg, man)
    if ctrl.n_dg != mg.n_dg:
        raise ModelError(f"controller drives {ctrl.n_dg} DGs, network has {mg.n_dg}")
    trace = run(mg, scenario, ctrl)
    stem = args.out_stem or f"{scenario.name or 'scenario'}_{ctrl.kind}"
    man.write(args.out_dir, f"{stem}.csv", trace.to_csv())
    man.write(args.out_dir, f"{stem}.svg", figure(trace_panels({ctrl.kind: trace})))
    info = {"samples": len(trace), "truncated": trace.truncated, "clamped_samples": int(trace.clamped.sum()),
            "final_max_abs_soc_dif": float(np.max(np.abs(trace.soc_dif[-1]))) if len(trace) else None,
            "max_residual": float(trace.residual.max()) if len(trace) else None}
    man.write(args.out_dir, f"{stem}.summary.json", _json(info))
    _say(args, f"{len(trace)} samples -> {args.out_dir / (stem + '.csv')}; "
               f"final max|soc_dif| = {info['final_max_abs_soc_dif']:.4g} %")
    if trace.truncated:
        raise PowerFlowError(f"simulation truncated at {trace.truncated}")


def cmd_report(args, man: RunManifest):
    a_path, b_path = Path(args.trace_a), Path(args.trace_b)
    a, b = read_trace(_read_text(a_path)), read_trace(_read_text(b_path))
    man.add_input(a_path)
    man.add_input(b_path)
    events = tuple(float(t) for t in args.events.split(",")) if args.events else ()
    for tr in (a, b):
        tr.event_times = events
    b.ems_enable_time = args.ems_enable
    rep = compare(a, b)
    man.write(args.out_dir, f"{args.out_stem}.json", _json(rep))
    rows = ["| signal | max abs delta | final abs delta |", "|---|---|---|"]
    rows += [f"| {k} | {v['max']:.6g} | {v['final']:.6g} |" for k, v in rep["deltas"].items()]
    rows += ["", "| metric | A | B |", "|---|---|---|"]
    rows += [f"| {k} | {rep['a'][k]:.6g} | {rep['b'][k]:.6g} |" for k in rep["a"]]
    rows += ["", f"terminal max|soc_dif| reduction (B vs A): {rep['soc_dif_reduction']:.4f}"]
    man.write(args.out_dir, f"{args.out_stem}.md", "\n".join(rows) + "\n")
    man.write(args.out_dir, f"{args.out_stem}.svg",
              figure(trace_panels({f"A {a_path.stem}": a, f"B {b_path.stem}": b}, ("f", "f_n", "p_pv", "p_inv", "p_bat", "soc",
                                                                    "soc_dif"))))
    _say(args, "\n".join(rows))


# Entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nnems", description="Energy management pipeline for islanded PV-battery microgrids.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=Path("out"))
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    # the same flags are accepted after the subcommand; SUPPRESS keeps them from overriding
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pv-fit", parents=[common], help="fit the linear panel model to an irradiance/power curve")
    s.add_argument("curve", nargs="?", help="CSV of irr_w_m2,p_panel_w (default: bundled datasheet curve)")

    s = sub.add_parser("dataset", parents=[common], help="run the sequential OPF over a profile")
    s.add_argument("--network")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--profile", help="profile CSV t_iso,irr_dg1..,load_mult")
    src.add_argument("--synthesize", action="store_true", help="use the synthetic month (default)")
    s.add_argument("--days", type=int, default=31)
    s.add_argument("--dt", type=int, default=5, help="minutes")
    s.add_argument("--resample", action="store_true", help="resample --profile to --dt")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--banded", action="store_true", help="load-stepped f_n bands (default)")
    mode.add_argument("--fixed-bounds", action="store_true", help="f_n in [0.99, 1.01] at every step")
    s.add_argument("--high-load-band", choices=("bottom", "top"), default="bottom")
    s.add_argument("--out", default="dataset.csv")

    s = sub.add_parser("train", parents=[common], help="fit the controller network to a dataset")
    s.add_argument("dataset")
    s.add_argument("--hidden", type=int, default=10)
    s.add_argument("--epochs", type=int, default=1000)
    s.add_argument("--fractions", default="0.8,0.1,0.1")
    s.add_argument("--decentralized", action="store_true")
    s.add_argument("--out-stem", default="model")

    s = sub.add_parser("simulate", parents=[common], help="closed-loop run of a scenario")
    s.add_argument("scenario", help="scenario JSON file or bundled name (charging, discharging)")
    s.add_argument("--network")
    s.add_argument("--controller", default="fixed", help="'fixed', a model file, or a directory of per-DG models")
    s.add_argument("--out-stem")

    s = sub.add_parser("report", parents=[common], help="compare two simulation traces")
    s.add_argument("trace_a")
    s.add_argument("trace_b")
    s.add_argument("--events", default="", help="comma-separated event times, s")
    s.add_argument("--ems-enable", type=float, default=6.0)
    s.add_argument("--out-stem", default="report")
    return p


_COMMANDS = {"pv-fit": cmd_pv_fit, "dataset": cmd_dataset, "train": cmd_train, "simulate": cmd_simulate,
             "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "hidden", 1) < 1 or getattr(args, "days", 1) < 1:
            raise UsageError("--hidden and --days must be positive")
    except UsageError as exc:
        print(f"nnems: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    man = RunManifest(args.command, params, args.seed)
    started = time.perf_counter()
    try:
        _COMMANDS[args.command](args, man)
    except UsageError as exc:
        print(f"nnems: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PowerFlowError, TrainingError, SocFault, np.linalg.LinAlgError) as exc:
        print(f"nnems: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DatasetError as exc:
        numeric = isinstance(exc.__cause__, (PowerFlowError, SocFault))
        print(f"nnems: {'numerical failure' if numeric else 'data error'}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    except (ProfileError, NetworkError, ModelError, ScenarioError, TimelineMismatch, ValueError,
            OSError) as exc:
        print(f"nnems: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    man.finish(args.out_dir, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
