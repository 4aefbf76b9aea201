"""Command-line front end.

``nmmcaic run-grid CONFIG --out DIR`` runs a Monte Carlo grid and writes
``rb_table.csv``, ``rb_table.md`` and ``replicates.ndjson``.
``nmmcaic fit DATA.csv MODEL.cfg`` fits one dataset and prints its cAIC.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import warnings
from pathlib import Path

from .caic import caic_method1, caic_method2, effective_df
from .config import load_grid, load_model_config
from .errors import CaicError, ConfigError, SpecError
from .estimation import fit
from .model import Dataset
from .simulation import run_simulation

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CSV_COLUMNS = [
    "n_ta", "dispersion_name", "dispersion_value", "delta",
    "rb_method2", "rb_method2_se", "rb_method1", "rb_method1_se",
    "n_converged", "n_discarded", "bc_true", "bc_true_se",
    "bc_est_method2", "bc_est_method2_se", "bc_est_method1", "bc_est_method1_se", "status",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def _threads(arg: int | None, grid_threads: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("CAIC_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CAIC_THREADS must be an integer, got {env!r}") from None
    if grid_threads:
        return max(1, grid_threads)
    return os.cpu_count() or 1


def _row_record(grid, row, result, disp_name, error=None) -> dict:
    rec = {"n_ta": row.n_ta, "dispersion_name": disp_name, "dispersion_value": float(row.dispersion),
           "delta": float(row.delta)}
    if result is None:
        for c in CSV_COLUMNS[4:-1]:
            rec[c] = None
        rec["status"] = f"error: {error}"
        return rec
    for m in (2, 1):
        est = result.bc_est.get(m)
        rec[f"rb_method{m}"] = result.rb.get(m)
        rec[f"rb_method{m}_se"] = result.rb_se.get(m)
        rec[f"bc_est_method{m}"] = est.value if est else None
        rec[f"bc_est_method{m}_se"] = est.se if est else None
    rec["n_converged"] = result.n_converged
    rec["n_discarded"] = result.n_discarded
    rec["bc_true"] = result.bc_true.value
    rec["bc_true_se"] = result.bc_true.se
    rec["status"] = "ok" if not result.warnings else "warning: " + "; ".join(result.warnings)
    return rec


def render_csv(records, timestamp: str | None) -> str:
    buf = io.StringIO()
    if timestamp:
        buf.write(f"# generated {timestamp}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def render_markdown(records, family: str) -> str:
    cols = ["n_ta", "dispersion_name", "dispersion_value", "delta", "rb_method2", "rb_method1",
            "bc_true", "n_converged", "n_discarded"]
    head = ["n", "dispersion", "value", "delta", "RB method 2", "RB method 1", "BC true",
            "kept", "discarded"]

    def cell(r, c):
        v = r[c]
        if v is None:
            return "-"
        if c.startswith("rb_"):
            se = r[c + "_se"]
            return f"{v:.3f} ({se:.3f})" if se is not None and math.isfinite(se) else f"{v:.3f}"
        if c == "bc_true":
            return f"{v:.2f} ({r['bc_true_se']:.2f})"
        if isinstance(v, float):
            return f"{v:g}"
        return str(v)

    body = [[cell(r, c) for c in cols] for r in records]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(head)]
    lines = [f"Relative bias of the estimated bias correction ({family})", ""]
    lines.append("| " + " | ".join(h.ljust(w) for h, w in zip(head, widths)) + " |")
    lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    for b in body:
        lines.append("| " + " | ".join(x.rjust(w) for x, w in zip(b, widths)) + " |")
    return "\n".join(lines) + "\n"


def cmd_run_grid(args) -> int:
    grid = load_grid(args.config)
    workers = _threads(args.threads, grid.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "replicates.ndjson"
    log_path.write_text("")
    records = []
    failed = 0
    disp_name = grid.base_spec.dispersion_name
    for r_i, row in enumerate(grid.rows):
        cfg = grid.sim_config(row, seed=args.seed)
        print(f"row {r_i + 1}/{len(grid.rows)}: n_ta={row.n_ta} {disp_name}={row.dispersion:g} "
              f"delta={row.delta:g}", file=sys.stderr)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = run_simulation(cfg, workers=workers)
        except CaicError as exc:
            failed += 1
            records.append(_row_record(grid, row, None, disp_name, exc))
            continue
        with log_path.open("a") as fh:
            for rec in res.records:
                d = json.loads(rec.to_json())
                d["row"] = r_i
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        records.append(_row_record(grid, row, res, disp_name))
    stamp = None if args.no_timestamp else _dt.datetime.now(_dt.timezone.utc).isoformat(
        timespec="seconds")
    (out / "rb_table.csv").write_text(render_csv(records, stamp))
    (out / "rb_table.md").write_text(render_markdown(records, grid.base_spec.family.value))
    print((out / "rb_table.md").read_text(), end="")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_fit(args) -> int:
    spec, options = load_model_config(args.spec)
    data = Dataset.from_csv(args.data)
    data.validate(spec)
    res = fit(data, spec, options)
    if not res.converged:
        print(f"fit did not converge: gradient max-norm {res.gradient_norm:.3e}, "
              f"inner gradient {res.inner_gradient_norm:.3e}; {res.message}", file=sys.stderr)
        return EXIT_NUMERIC
    if spec.continuous:
        rep = caic_method1(res, data)
    else:
        rep = caic_method2(res, data)
        print(f"note: method 1 needs a density differentiable in y and is not available for "
              f"the {spec.family.value} family; reporting method 2 only", file=sys.stderr)
    print(f"-2 l_c          {rep.neg2_lc:.6f}")
    print(f"p_c             {rep.p_c}")
    print(f"q               {rep.q}")
    print(f"trace           {rep.method2_trace:.6f}")
    print(f"effective df    {effective_df(rep):.6f}")
    if rep.method1_penalty is not None:
        print(f"cAIC method 1   {rep.caic_method1:.6f}  (penalty {rep.method1_penalty:.6f})")
    print(f"cAIC method 2   {rep.caic_method2:.6f}  (penalty {rep.method2_penalty:.6f})")
    if res.boundary:
        print(f"boundary        {', '.join(res.boundary)}")
    if rep.flags:
        print(f"flags           {', '.join(rep.flags)}")
    if args.json:
        record = {"fit": res.to_record(), "caic": rep.to_record(), "family": spec.family.value,
                  "link": spec.link.value}
        Path(args.json).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmmcaic", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("run-grid", help="run a Monte Carlo grid and write RB tables")
    g.add_argument("config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--threads", type=int, default=None)
    g.add_argument("--no-timestamp", action="store_true")
    g.set_defaults(func=cmd_run_grid)
    f = sub.add_parser("fit", help="fit one dataset and report cAIC")
    f.add_argument("data")
    f.add_argument("spec")
    f.add_argument("--json", default=None)
    f.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, SpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CaicError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
