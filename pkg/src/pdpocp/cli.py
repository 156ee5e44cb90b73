"""Command-line front end: ``solve``, ``sweep``, ``experiment`` and ``certify``.

Exit codes: 0 converged / success, 1 configuration or input error,
2 outer iteration cap reached, 3 inner solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .certificate import DegenerateArcError, certify
from .experiments import (
    KINDS, COMPARISON_COLUMNS, baseline_study, dual_sweep, iterate_dump, n_sweep,
    random_controls, run_rng, success_rate_study, comparison_rows,
)
from .grid import TimeGrid
from .io import (
    ConfigError, InputFormatError, Manifest, build_inner_config, build_model, build_pdp_config,
    load_config, output_dir, pdp_config_dict, read_controls, validate_config, write_controls,
    write_csv, write_history, write_json, write_states,
)
from .models import InvalidParameterError
from .pdp import PdpStatus, pdp_run

EXIT_OK, EXIT_CONFIG, EXIT_MAX_OUTER, EXIT_INNER = 0, 1, 2, 3
_STATUS_EXIT = {
    PdpStatus.CONVERGED: EXIT_OK,
    PdpStatus.MAX_OUTER: EXIT_MAX_OUTER,
    PdpStatus.INNER_FAILED: EXIT_INNER,
}
log = logging.getLogger("pdpocp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def parse_range(text: str):
    """``start:stop:step`` (stop included) or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range {text!r} must look like start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if not step > 0 or stop < start:
            raise ConfigError(f"range {text!r} needs step > 0 and stop >= start")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + k * step for k in range(count)]
    return [float(v) for v in text.split(",") if v.strip()]


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", required=False, help="double_integrator | free_flying_robot")
    p.add_argument("--out", help="output directory (overridden by $PDPOCP_OUT)")
    p.add_argument("--seed", type=int, help="seed for random starts")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdpocp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("solve", help="run the primal-dual penalty method once")
    _common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--step-rule", type=int, choices=(1, 2))
    p.add_argument("--c0", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--init", choices=("zero", "random"), help="initial control (default zero)")

    p = sub.add_parser("sweep", help="sample the dual function on a grid of c")
    _common(p)
    p.add_argument("--N", type=int)
    p.add_argument("--c", default="0:20:1", help="start:stop:step or comma list")

    p = sub.add_parser("experiment", help="success-rate, N-sweep, baseline or comparison studies")
    _common(p)
    p.add_argument("--kind", required=True, choices=KINDS + ("comparison",))
    p.add_argument("--N", help="grid size or comma list")
    p.add_argument("--runs", type=int)
    p.add_argument("--step-rule", type=int, choices=(1, 2))
    p.add_argument("--threads", type=int, default=1, help="cap on concurrent runs")
    p.add_argument("--timing", action="store_true", help="write wall-clock columns")

    p = sub.add_parser("certify", help="optimality certificate for a stored control")
    _common(p)
    p.add_argument("--u", required=True, help="u.csv written by solve")
    return parser


def _doc_from_args(args) -> dict:
    doc = load_config(args.config) if args.config else {}
    if args.model:
        doc["model"] = args.model
    if "model" not in doc:
        raise ConfigError("missing model tag (use --model or a config file)")
    if args.seed is not None:
        doc["seed"] = args.seed
    pdp = dict(doc.get("pdp", {}))
    for flag, key in (("c0", "c0"), ("eps", "eps"), ("max_outer", "max_outer")):
        if getattr(args, flag, None) is not None:
            pdp[key] = getattr(args, flag)
    if pdp:
        doc["pdp"] = pdp
    if getattr(args, "step_rule", None) is not None:
        doc["step_rule"] = args.step_rule
    if getattr(args, "init", None) is not None:
        doc["init"] = args.init
    validate_config(doc)
    return doc


def _grid_size(args, doc, default):
    N = getattr(args, "N", None)
    if N is None:
        N = doc.get("N", default)
    return N


def cmd_solve(args) -> int:
    doc = _doc_from_args(args)
    model = build_model(doc)
    N = int(_grid_size(args, doc, 100))
    doc["N"] = N
    grid = TimeGrid(model.t_f, N)
    cfg = build_pdp_config(doc)
    u0 = None
    if doc.get("init", "zero") == "random":
        u0 = random_controls(model, grid, run_rng(doc.get("seed", 0), 0))
    result = pdp_run(model, grid, cfg, u0)
    out = output_dir(args.out or doc.get("out"))
    man = Manifest(out, {"doc": doc, "pdp": pdp_config_dict(cfg)}, "solve")
    man.add(write_controls(out / "u.csv", grid, result.final_u))
    man.add(write_states(out / "x.csv", grid, result.final_states))
    man.add(write_history(out / "history.csv", result.iterates))
    last = result.iterates[-1]
    man.add(write_json(out / "summary.json", {
        "status": result.status.value,
        "outer_iterations": result.outer_iterations,
        "c_final": last.c,
        "q_final": last.q,
        "phi": last.phi,
        "h_linf": last.h_linf,
        "terminal_state": result.final_states.terminal.tolist(),
        "model": model.tag,
        "N": N,
    }))
    man.write()
    print(f"{result.status.value}: {result.outer_iterations} outer iterations, "
          f"phi={last.phi:.10g}, |h|inf={last.h_linf:.3g}")
    return _STATUS_EXIT[result.status]


def cmd_sweep(args) -> int:
    doc = _doc_from_args(args)
    model = build_model(doc)
    N = int(_grid_size(args, doc, 100))
    grid = TimeGrid(model.t_f, N)
    cs = parse_range(args.c)
    doc.update(N=N, c_values=cs)
    points = dual_sweep(model, grid, cs, build_inner_config(doc))
    out = output_dir(args.out or doc.get("out"))
    man = Manifest(out, doc, "sweep")
    rows = [(p.c, p.q, p.phi, p.h_l1, p.h_linf, p.converged) for p in points]
    man.add(write_csv(out / "dual.csv", ("c", "q", "phi", "h_l1", "h_linf", "converged"), rows))
    man.write()
    print(f"{len(points)} dual samples written to {out / 'dual.csv'}")
    return EXIT_OK if all(p.converged for p in points) else EXIT_INNER


def _run_rows(report, timing):
    return [(r.run, r.converged, r.status, r.outer_iterations, r.wall_time if timing else None,
             r.phi, r.h_linf, r.terminal_error) for r in report.records]


_RUN_HEADER = ("run", "converged", "status", "outer_iterations", "wall_time", "phi", "h_linf",
               "terminal_error")


def cmd_experiment(args) -> int:
    doc = _doc_from_args(args)
    exp = dict(doc.get("experiment", {}))
    model = build_model(doc)
    if args.N is not None:
        Ns = [int(v) for v in args.N.split(",")]
    else:
        Ns = [int(v) for v in np.atleast_1d(exp.get("N", doc.get("N", 100)))]
    runs = args.runs if args.runs is not None else int(exp.get("runs", 20))
    seed = int(doc.get("seed", exp.get("seed", 0)))
    init_range = tuple(exp.get("init_range", (-0.4, 0.4)))
    timing = bool(args.timing or exp.get("timing", False))
    threads = max(1, int(args.threads))
    doc["experiment"] = {**exp, "kind": args.kind, "N": Ns, "runs": runs, "seed": seed,
                         "init_range": list(init_range), "timing": timing}
    cfg = build_pdp_config(doc)
    out = output_dir(args.out or doc.get("out"))
    man = Manifest(out, doc, f"experiment {args.kind}")
    code = EXIT_OK
    if args.kind == "success_rate":
        grid = TimeGrid(model.t_f, Ns[0])
        rep = success_rate_study(model, grid, runs, seed, cfg, init_range, threads)
        man.add(write_csv(out / "success_rate.csv", _RUN_HEADER, _run_rows(rep, timing)))
        print(f"success rate {rep.success_rate:.0f}% over {runs} runs")
    elif args.kind == "baseline":
        grid = TimeGrid(model.t_f, Ns[0])
        rep = baseline_study(model, grid, runs, seed, cfg.inner, cfg.eps, init_range, threads)
        man.add(write_csv(out / "baseline.csv", _RUN_HEADER, _run_rows(rep, timing)))
        print(f"baseline success rate {rep.success_rate:.0f}% over {runs} runs")
    elif args.kind == "n_sweep":
        rep = n_sweep(model, Ns, cfg, threads=threads)
        rows = [(N, r.status.value, d, *ch) for N, r, d, ch in
                zip(rep.N_values, rep.results, rep.distances, rep.channel_distances)]
        header = ("N", "status", "distance") + tuple(f"distance_u{r + 1}" for r in range(model.m))
        man.add(write_csv(out / "n_sweep.csv", header, rows))
        for N, r in zip(rep.N_values, rep.results):
            man.add(write_controls(out / f"u_N{N}.csv", TimeGrid(model.t_f, N), r.final_u))
        if not all(r.converged for r in rep.results):
            code = EXIT_MAX_OUTER
    elif args.kind == "iterate_dump":
        grid = TimeGrid(model.t_f, Ns[0])
        res = pdp_run(model, grid, cfg)
        rows = []
        for k, U in enumerate(iterate_dump(res)):
            rows.extend((k, t, *U[:, j]) for j, t in enumerate(grid.control_times))
        header = ("k", "t") + tuple(f"u{r + 1}" for r in range(model.m))
        man.add(write_csv(out / "iterates.csv", header, rows))
        man.add(write_history(out / "history.csv", res.iterates))
        code = _STATUS_EXIT[res.status]
    elif args.kind == "dual_sweep":
        grid = TimeGrid(model.t_f, Ns[0])
        cs = exp.get("c_values", list(range(21)))
        points = dual_sweep(model, grid, cs, cfg.inner)
        rows = [(p.c, p.q, p.phi, p.h_l1, p.h_linf, p.converged) for p in points]
        man.add(write_csv(out / "dual.csv", ("c", "q", "phi", "h_l1", "h_linf", "converged"), rows))
    else:
        rows = comparison_rows(model.tag, Ns, runs, seed, init_range, threads, timing,
                           model_params=doc.get("model_params"))
        man.add(write_csv(out / "comparison.csv", COMPARISON_COLUMNS, rows))
    man.write()
    return code


def cmd_certify(args) -> int:
    doc = _doc_from_args(args)
    model = build_model(doc)
    grid, u = read_controls(args.u, model.t_f)
    if u.m != model.m:
        raise InputFormatError(f"{args.u}:1: {u.m} control column(s), model {model.tag} has {model.m}")
    cert = certify(model, grid, u)
    out = output_dir(args.out or doc.get("out"))
    man = Manifest(out, {**doc, "u": str(Path(args.u).name), "N": grid.N}, "certify")
    man.add(write_json(out / "certificate.json", cert.to_dict()))
    man.write()
    print(f"max_clip_violation={cert.max_clip_violation:.3g} inconclusive={cert.inconclusive}")
    return EXIT_OK


_COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "experiment": cmd_experiment, "certify": cmd_certify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, InputFormatError, InvalidParameterError, DegenerateArcError) as exc:
        print(f"pdpocp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as exc:
        print(f"pdpocp {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
