"""Command-line interface.

Subcommands::

    proxyconf simulate  --dgp reference --out cohort.csv
    proxyconf estimate  --cohort cohort.csv --confusion table1 --method matrix-adjust
    proxyconf bootstrap --cohort cohort.csv --confusion table1 --bootstrap both --replicates 10x10
    proxyconf compare   --cohort cohort.csv --confusion table1

Reports are JSON (to ``--out`` or stdout).  Every report carries the seed, a
hash of the run configuration, sha256 digests of the input files and the
tool version.  ``compare`` additionally prints an aligned text table that is
rendered from the JSON.

Exit codes: 0 report written, 2 invalid input, 3 numerical failure,
4 file-system error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as rngs
from .adjust import MAX_CLAMPED_MASS, MAX_DEGENERATE_MASS, run_adjustment
from .bootstrap import BootstrapPlan, run_bootstrap
from .core import (
    TABLE1_CATEGORIES,
    ConfusionCounts,
    Method,
    MisclassificationModel,
    accuracy,
    read_cohort,
    read_confusion,
    row_normalize,
    table1_counts,
    write_cohort,
    write_confusion,
)
from .errors import InputError, InvalidConfig, NumericalError, ProxyConfError
from .simex import SimexConfig, mc_simex
from .synth import (
    DiscreteDgp,
    covariate_only_effects,
    generate_cohort,
    load_dgp,
    shipped_config_names,
    shipped_dgp,
    true_effects,
    true_marginal_u,
    true_subgroup_risk_ratios,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

SHIPPED_CONFUSION = "table1"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _clean(obj):
    """Make numpy scalars/arrays and non-finite floats JSON friendly."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=False) + "\n"


def parse_replicates(text: str | None, mode: str) -> tuple[int | None, int | None]:
    """``"100"`` or ``"10x10"`` (analysis x validation) into a replicate pair."""
    if text is None:
        return None, None
    parts = text.lower().split("x")
    try:
        nums = [int(p) for p in parts]
    except ValueError:
        raise InvalidConfig(f"--replicates must be an integer or AxB, got {text!r}") from None
    if len(nums) == 2:
        if mode != "both":
            raise InvalidConfig("AxB replicates only apply to --bootstrap both")
        return nums[0], nums[1]
    if len(nums) != 1:
        raise InvalidConfig(f"--replicates must be an integer or AxB, got {text!r}")
    if mode == "both":
        side = int(round(np.sqrt(nums[0])))
        if side * side != nums[0]:
            raise InvalidConfig("--bootstrap both needs AxB replicates or a perfect square")
        return side, side
    return (nums[0], None) if mode == "analysis" else (None, nums[0])


def _category_names(args) -> tuple[str, ...]:
    if args.categories:
        return tuple(s.strip() for s in args.categories.split(","))
    if getattr(args, "confusion", None) == SHIPPED_CONFUSION:
        return TABLE1_CATEGORIES
    return ()


def _missing_as(value, names) -> int | None:
    if value is None or value == "drop":
        return None
    if value in names:
        return names.index(value)
    try:
        return int(value)
    except ValueError:
        raise InvalidConfig(f"--missing-as must be 'drop', a category index or a category name; got {value!r}") from None


class _Inputs:
    """Resolved input files plus their digests."""

    def __init__(self, args, need_confusion: bool):
        self.digests = {}
        names = _category_names(args)
        self.confusion = None
        if args.confusion:
            if args.confusion == SHIPPED_CONFUSION:
                self.confusion = table1_counts()
                self.digests["confusion"] = "shipped:table1:" + hashlib.sha256(
                    np.ascontiguousarray(self.confusion.counts, dtype=np.int64).tobytes()).hexdigest()
            else:
                self.confusion = read_confusion(args.confusion)
                self.digests["confusion"] = sha256_file(args.confusion)
        elif need_confusion:
            raise InvalidConfig(f"--method {args.method} needs --confusion")
        k = self.confusion.k if self.confusion is not None else (len(names) or None)
        self.cohort = read_cohort(args.cohort, k=k, category_names=names)
        self.digests["cohort"] = sha256_file(args.cohort)
        if self.confusion is not None and self.confusion.k != self.cohort.k:
            raise InvalidConfig(f"confusion table is {self.confusion.k}x{self.confusion.k} "
                                f"but the cohort has {self.cohort.k} categories")
        self.names = tuple(self.cohort.category_names) or tuple(str(j) for j in range(self.cohort.k))
        self.missing_as = _missing_as(args.missing_as, list(self.names))

    def misclassification(self, alpha: float) -> MisclassificationModel | None:
        return None if self.confusion is None else row_normalize(self.confusion, alpha)


def _simex_config(args) -> SimexConfig:
    grid = tuple(float(v) for v in args.lambdas.split(",")) if args.lambdas else SimexConfig.lambda_grid
    return SimexConfig(lambda_grid=grid, b_per_lambda=args.simex_b, extrapolant_degree=args.simex_degree,
                       scale=args.simex_scale, seed=args.seed)


def _run_config(args, exclude=("out", "threads", "func", "table")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in exclude}


def _header(args, digests) -> dict:
    cfg = _run_config(args)
    return {
        "tool": "proxyconf",
        "version": __version__,
        "command": args.command,
        "seed": args.seed,
        "config_hash": config_hash(cfg),
        "inputs": digests,
        "config": cfg,
    }


def _misclassification_block(inputs: _Inputs, mis: MisclassificationModel | None) -> dict | None:
    if inputs.confusion is None:
        return None
    return {
        "k": inputs.confusion.k,
        "categories": list(inputs.names),
        "counts": inputs.confusion.counts,
        "accuracy": accuracy(inputs.confusion),
        "pi": mis.pi,
        "condition_number": mis.condition_number,
        "smoothing_alpha": mis.smoothing_alpha,
    }


def _estimate(inputs: _Inputs, mis, method: Method, args, subgroups: bool) -> dict:
    """One method's point estimate as a report block."""
    if method is Method.MC_SIMEX:
        est, trace = mc_simex(inputs.cohort, mis, _simex_config(args), backend=args.backend,
                              missing_as=inputs.missing_as, threads=args.threads, ridge=args.ridge)
        return {"estimate": est.to_dict(), "simex": trace.to_dict()}
    adj, dropped = run_adjustment(inputs.cohort, mis, method, args.backend, inputs.missing_as,
                                  max_clamped=args.max_clamped, max_degenerate=args.max_degenerate,
                                  ridge=args.ridge)
    block = {"estimate": adj.estimate(method, dropped).to_dict(),
             "marginal_u": dict(zip(inputs.names, adj.marginal_u.tolist()))}
    if subgroups:
        block["subgroups"] = adj.subgroups(list(inputs.names))
    return block


def _bootstrap(inputs: _Inputs, method: Method, args) -> dict:
    ra, rv = parse_replicates(args.replicates, args.bootstrap)
    plan = BootstrapPlan(mode=args.bootstrap, r_analysis=ra, r_validation=rv, confidence=args.confidence,
                         seed=args.seed, estimator=method.value)
    res = run_bootstrap(inputs.cohort, inputs.confusion, plan, backend=args.backend, alpha=args.alpha,
                        missing_as=inputs.missing_as, simex_config=_simex_config(args),
                        threads=args.threads, max_clamped=args.max_clamped, keep_replicates=False,
                        ridge=args.ridge)
    return {
        "mode": plan.mode,
        "r_analysis": plan.r_analysis,
        "r_validation": plan.r_validation,
        "confidence": plan.confidence,
        "n_requested": res.n_requested,
        "n_survived": res.n_survived,
        "failures": res.failures,
        "intervals": res.to_records(),
    }


def _write_text(text: str, out) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_config(args):
    if args.config and args.dgp:
        raise InvalidConfig("give either --config or --dgp, not both")
    if args.config:
        return load_dgp(args.config), {"config": sha256_file(args.config)}
    name = args.dgp or "reference"
    if name not in shipped_config_names():
        raise InvalidConfig(f"unknown shipped DGP {name!r}; choose from {shipped_config_names()}")
    return shipped_dgp(name), {"config": f"shipped:{name}"}


def truth_report(dgp) -> dict:
    """Enumerated population quantities of a discrete DGP."""
    names = list(dgp.category_names) or [str(j) for j in range(dgp.k)]
    rr_u = true_subgroup_risk_ratios(dgp)
    return {
        "effects": true_effects(dgp).to_dict(),
        "covariate_only_effects": covariate_only_effects(dgp).to_dict(),
        "marginal_u": dict(zip(names, true_marginal_u(dgp).tolist())),
        "subgroup_risk_ratios": dict(zip(names, np.asarray(rr_u).tolist())),
    }


def sample_validation(pi, per_category: int, seed: int) -> ConfusionCounts:
    """Validation table with ``per_category`` records drawn from each row of ``pi``."""
    g = rngs.stream(seed, rngs.SIM_VALIDATION)
    pi = np.asarray(pi, dtype=float)
    return ConfusionCounts(np.stack([g.multinomial(per_category, row) for row in pi]))


def cmd_simulate(args) -> int:
    dgp, digests = _load_config(args)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n"] = args.n
    if changes:
        dgp = dgp.replace(**changes)
    args.seed = dgp.seed
    if args.out is None:
        raise InvalidConfig("simulate needs --out for the cohort CSV")
    cohort = generate_cohort(dgp)
    write_cohort(cohort, args.out)
    written = {"cohort": str(args.out)}
    if args.validation:
        conf_path = args.confusion_out or str(Path(args.out).with_suffix(".confusion.csv"))
        write_confusion(sample_validation(dgp.pi_true, args.validation, dgp.seed), conf_path)
        written["confusion"] = conf_path
    report = _header(args, digests)
    report["dgp"] = dgp.to_dict()
    report["n_rows"] = cohort.n
    report["n_covariates"] = cohort.p
    report["n_missing"] = cohort.n_missing
    if isinstance(dgp, DiscreteDgp):
        report["truth"] = truth_report(dgp)
    truth_path = args.truth or str(Path(args.out).with_suffix(".truth.json"))
    written["truth"] = truth_path
    report["outputs"] = written
    Path(truth_path).write_text(dumps(report))
    return EXIT_OK


def cmd_estimate(args) -> int:
    method = Method.parse(args.method)
    inputs = _Inputs(args, need_confusion=method in (Method.MATRIX_ADJUST, Method.MC_SIMEX))
    mis = inputs.misclassification(args.alpha)
    report = _header(args, inputs.digests)
    report["misclassification"] = _misclassification_block(inputs, mis)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report.update(_estimate(inputs, mis, method, args, args.subgroups))
    report["warnings"] = sorted({str(w.message) for w in caught})
    _write_text(dumps(report), args.out)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    method = Method.parse(args.method)
    if method is Method.ORACLE:
        raise InvalidConfig("the oracle estimate has no bootstrap")
    inputs = _Inputs(args, need_confusion=method is not Method.NAIVE)
    mis = inputs.misclassification(args.alpha)
    report = _header(args, inputs.digests)
    report["misclassification"] = _misclassification_block(inputs, mis)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report["bootstrap"] = _bootstrap(inputs, method, args)
    report["warnings"] = sorted({str(w.message) for w in caught})
    _write_text(dumps(report), args.out)
    return EXIT_OK


COMPARE_ORDER = (Method.NAIVE, Method.MATRIX_ADJUST, Method.MC_SIMEX, Method.ORACLE)


def compare_rows(inputs: _Inputs, args) -> list[dict]:
    mis = inputs.misclassification(args.alpha)
    rows = []
    for method in COMPARE_ORDER:
        if method is Method.ORACLE and inputs.cohort.u_true is None:
            continue
        if method in (Method.MATRIX_ADJUST, Method.MC_SIMEX) and mis is None:
            continue
        row = {"method": method.value}
        try:
            block = _estimate(inputs, mis, method, args, subgroups=False)
            est = block["estimate"]
            row.update(risk_ratio=est["risk_ratio"], odds_ratio=est["odds_ratio"],
                       risk_treated=est["risk_treated"], risk_control=est["risk_control"],
                       clamped_mass=est["clamped_mass"], error=None)
        except NumericalError as exc:
            row.update(risk_ratio=None, odds_ratio=None, risk_treated=None, risk_control=None,
                       clamped_mass=None, error=f"{type(exc).__name__}: {exc}")
        if args.bootstrap and method is not Method.ORACLE and row["error"] is None:
            try:
                boot = _bootstrap(inputs, method, args)
                iv = {r["estimand"]: r for r in boot["intervals"]}
                row["rr_interval"] = [iv["risk_ratio"]["lower"], iv["risk_ratio"]["upper"]]
                row["or_interval"] = [iv["odds_ratio"]["lower"], iv["odds_ratio"]["upper"]]
                row["n_survived"] = boot["n_survived"]
            except NumericalError as exc:
                row["bootstrap_error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def _fmt_num(v, digits=4) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def render_table(report: dict) -> str:
    """Aligned text rendering of a ``compare`` report."""
    has_iv = any("rr_interval" in r for r in report["rows"])
    head = ["method", "RR", "OR", "P(Y|do(1))", "P(Y|do(0))"]
    if has_iv:
        head += ["RR interval", "OR interval"]
    lines = [head]
    for r in report["rows"]:
        line = [r["method"], _fmt_num(r["risk_ratio"]), _fmt_num(r["odds_ratio"]),
                _fmt_num(r["risk_treated"]), _fmt_num(r["risk_control"])]
        if has_iv:
            for key in ("rr_interval", "or_interval"):
                iv = r.get(key)
                line.append(f"[{iv[0]:.4f}, {iv[1]:.4f}]" if iv else "-")
        if r.get("error"):
            line[1] = r["error"].split(":")[0]
        lines.append(line)
    widths = [max(len(row[j]) for row in lines) for j in range(len(head))]
    out = []
    for i, row in enumerate(lines):
        out.append("  ".join(cell.ljust(w) if j == 0 else cell.rjust(w) for j, (cell, w) in enumerate(zip(row, widths))))
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    if report.get("truth"):
        out.append(f"truth RR {report['truth']['risk_ratio']:.4f}  OR {report['truth']['odds_ratio']:.4f}")
    return "\n".join(out) + "\n"


def cmd_compare(args) -> int:
    inputs = _Inputs(args, need_confusion=False)
    report = _header(args, inputs.digests)
    mis = inputs.misclassification(args.alpha)
    report["misclassification"] = _misclassification_block(inputs, mis)
    if args.truth:
        truth = json.loads(Path(args.truth).read_text())
        report["inputs"]["truth"] = sha256_file(args.truth)
        report["truth"] = truth.get("truth", truth).get("effects")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report["rows"] = compare_rows(inputs, args)
    report["warnings"] = sorted({str(w.message) for w in caught})
    if args.out is not None and str(args.out) != "-":
        _write_text(dumps(report), args.out)
        sys.stdout.write(render_table(report))
    elif args.table:
        sys.stdout.write(render_table(report))
    else:
        sys.stdout.write(dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default, help="root seed for every random stream")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--out", default=None, help="output path (default: stdout)")


def _add_estimation(p, method_default="matrix-adjust"):
    p.add_argument("--cohort", required=True, help="cohort CSV")
    p.add_argument("--confusion", default=None,
                   help=f"confusion CSV (true labels on rows), or '{SHIPPED_CONFUSION}' for the shipped table")
    p.add_argument("--method", default=method_default, choices=[m.value.replace("_", "-") for m in Method])
    p.add_argument("--alpha", type=float, default=0.0, help="additive smoothing of the confusion counts")
    p.add_argument("--missing-as", default=None,
                   help="'drop' (default) or the category that rows without a proxy label are assigned to")
    p.add_argument("--categories", default=None, help="comma-separated category names")
    p.add_argument("--backend", default="glm", choices=("glm", "frequency"),
                   help="nuisance models: regression (glm) or cell frequencies over discrete covariates")
    p.add_argument("--ridge", type=float, default=1e-6, help="ridge penalty of the nuisance regressions")
    p.add_argument("--max-clamped", type=float, default=MAX_CLAMPED_MASS,
                   help="largest tolerated share of clamped negative mass")
    p.add_argument("--max-degenerate", type=float, default=MAX_DEGENERATE_MASS,
                   help="largest tolerated share of the average carried by degenerate cells")
    p.add_argument("--lambdas", default=None, help="SIMEX noise grid, comma separated")
    p.add_argument("--simex-b", type=int, default=100, help="SIMEX replicates per noise level")
    p.add_argument("--simex-degree", type=int, default=2, help="SIMEX extrapolant degree")
    p.add_argument("--simex-scale", default="log", choices=("log", "linear"))


def _add_bootstrap(p, required=True):
    p.add_argument("--bootstrap", choices=("analysis", "validation", "both"), default="both" if required else None)
    p.add_argument("--replicates", default=None, help="replicate count, or AxB for mode both (default 100 or 10x10)")
    p.add_argument("--confidence", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxyconf",
                                     description="Causal effects adjusted for a misclassified categorical confounder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic cohort (and its enumerated truth)")
    src = p.add_argument_group("DGP")
    src.add_argument("--config", default=None, help="DGP config JSON")
    src.add_argument("--dgp", default=None, help=f"shipped DGP name: {', '.join(shipped_config_names())}")
    p.add_argument("--n", type=int, default=None, help="override the number of rows")
    p.add_argument("--truth", default=None, help="truth/metadata JSON (default: <out>.truth.json)")
    p.add_argument("--validation", type=int, default=0,
                   help="also draw a validation table with this many records per true category")
    p.add_argument("--confusion-out", default=None, help="validation table path (default: <out>.confusion.csv)")
    _add_common(p, seed_default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="point estimate for one method")
    _add_estimation(p)
    p.add_argument("--subgroups", action="store_true", help="add per-category risk ratios")
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bootstrap", help="percentile intervals")
    _add_estimation(p)
    _add_bootstrap(p)
    _add_common(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("compare", help="all methods side by side")
    _add_estimation(p)
    _add_bootstrap(p, required=False)
    p.add_argument("--truth", default=None, help="truth JSON written by simulate")
    p.add_argument("--table", action="store_true", help="print the text table instead of JSON on stdout")
    _add_common(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"proxyconf: input error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"proxyconf: numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ProxyConfError as exc:
        print(f"proxyconf: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"proxyconf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
