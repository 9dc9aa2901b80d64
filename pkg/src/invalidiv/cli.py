"""Command-line front end: ``analyze``, ``simulate`` and ``validate-input``.

Configuration files use INI syntax (see README).  Exit codes: 0 on success,
1 when at least one method failed, 2 on input or parse errors.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .core import ReducedFormFit, first_stage_f, prepare, read_individual_csv, read_summary_csv
from .errors import InvalidIVError, MethodOptionError, ParseError, UnknownMethod
from .methods import REGISTRY, SPEC_PATTERN, MethodSpec, make_spec, parse_method, run_method_capturing
from .simulation import SimScenario, run_experiment

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2
MULTI_VALUED = ("v",)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class AnalysisConfig:
    """Everything ``analyze`` needs, after validation."""

    input: Path | None
    input_kind: str = "individual"
    methods: list[MethodSpec] = field(default_factory=list)
    alpha: float = 0.05
    seed: int = 0
    n: int | None = None
    plot: bool = False
    out_dir: Path = Path(".")


def _read_ini(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read file: {exc.strerror}", None, path) from None
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise ParseError("key found before any [section] header", exc.lineno, path) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ParseError("malformed line", line, path) from None
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ParseError(exc.message.split(": ", 1)[-1], exc.lineno, path) from None
    return cp, text.splitlines(), path


def _locate(lines, section, key=None):
    """1-based line of ``[section]`` or of ``key`` within it."""
    current = None
    for i, raw in enumerate(lines, 1):
        s = raw.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"^{re.escape(key)}\s*[=:]", s):
            return i
    return None


def _get(cp, lines, path, section, key, conv, default=None):
    if not cp.has_option(section, key):
        return default
    raw = cp.get(section, key)
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ParseError(f"[{section}] {key}: cannot parse {raw!r}", _locate(lines, section, key), path) from None


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _floats(text):
    return [float(x) for x in str(text).replace(",", " ").split()]


def _ints(text):
    return [int(x) for x in str(text).replace(",", " ").split()]


def _split_methods(text):
    """Split on commas that are not inside parentheses."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch in ",\n" and depth == 0:
            if cur.strip():
                out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


ANALYSIS_KEYS = {"input", "input_kind", "methods", "alpha", "seed", "n", "plot"}


def load_analysis_config(path, overrides=None) -> AnalysisConfig:
    """Parse and validate an analysis config; ``overrides`` come from the command line."""
    cp, lines, path = _read_ini(path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if not cp.has_section("analysis"):
        raise ParseError("missing [analysis] section", None, path)
    for key in cp.options("analysis"):
        if key not in ANALYSIS_KEYS:
            raise ParseError(f"[analysis] unknown key {key!r}", _locate(lines, "analysis", key), path)
    for sec in cp.sections():
        if sec != "analysis" and not sec.startswith("method."):
            raise ParseError(f"unknown section [{sec}]", _locate(lines, sec), path)
        if sec.startswith("method.") and sec[len("method."):] not in REGISTRY:
            raise ParseError(f"section [{sec}] names an unknown method", _locate(lines, sec), path)

    g = lambda key, conv, default=None: _get(cp, lines, path, "analysis", key, conv, default)  # noqa: E731
    cfg = AnalysisConfig(
        input=None,
        input_kind=g("input_kind", lambda s: s.strip(), "individual"),
        alpha=g("alpha", float, 0.05),
        seed=g("seed", int, 0),
        n=g("n", int, None),
        plot=g("plot", _bool, False),
    )
    inp = g("input", lambda s: s.strip(), None)
    if inp is not None:
        cfg.input = (path.parent / inp) if not Path(inp).is_absolute() else Path(inp)
    if "input" in overrides:
        cfg.input = Path(overrides["input"])
    if "input_kind" in overrides:
        cfg.input_kind = overrides["input_kind"]
    if "seed" in overrides:
        cfg.seed = int(overrides["seed"])
    if cfg.input_kind not in ("individual", "summary"):
        raise ParseError("input_kind must be 'individual' or 'summary'", _locate(lines, "analysis", "input_kind"), path)
    if not 0 < cfg.alpha < 1:
        raise ParseError("alpha must lie in (0, 1)", _locate(lines, "analysis", "alpha"), path)
    if not cp.has_option("analysis", "methods"):
        raise ParseError("[analysis] needs a 'methods' list", _locate(lines, "analysis"), path)

    line = _locate(lines, "analysis", "methods")
    specs = []
    for item in _split_methods(cp.get("analysis", "methods")):
        try:
            specs.extend(_expand(item, cp))
        except UnknownMethod as exc:
            raise ParseError(str(exc), line, path) from None
        except MethodOptionError as exc:
            sec = f"method.{item.split('(')[0].strip()}"
            where = _locate(lines, sec) if cp.has_section(sec) else line
            raise MethodOptionError(f"{path}:{where}: {exc}") from None
    if not specs:
        raise ParseError("the methods list is empty", line, path)
    cfg.methods = specs
    return cfg


def _expand(item, cp):
    """Method specs for one list entry, merging options from its ``[method.X]`` section."""
    match = SPEC_PATTERN.match(item)
    if not match:
        raise UnknownMethod(f"cannot parse method identifier {item!r}")
    name, body = match.groups()
    if name not in REGISTRY:
        raise UnknownMethod(f"unknown method {name!r}; choose from {', '.join(sorted(REGISTRY))}")
    sec = f"method.{name}"
    opts = dict(cp.items(sec)) if cp.has_section(sec) else {}
    # inline options win over the section; validation happens once both are merged
    for part in (body or "").split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise MethodOptionError(f"{name}: option {part.strip()!r} must be key=value")
        k, v = part.split("=", 1)
        opts[k.strip()] = v.strip()
    multi = {k: _split_values(opts.pop(k)) for k in MULTI_VALUED if k in opts}
    if not multi:
        return [make_spec(name, opts)]
    out = []
    for k, values in multi.items():
        for val in values:
            out.append(make_spec(name, {**opts, k: val}))
    return out


def _split_values(text):
    return [s for s in str(text).replace(",", " ").split() if s]


# ---------------------------------------------------------------------------
# Analysis


def load_input(path, kind, n=None):
    if path is None:
        raise ParseError("no input file given (use --input or 'input' in [analysis])")
    path = Path(path)
    if not path.exists():
        raise ParseError("input file does not exist", None, path)
    if kind == "summary":
        return read_summary_csv(path, n=n)
    data = read_individual_csv(path)
    prepare(data)  # rank check up front; methods prepare their own copy
    return data


def first_stage_summary(data):
    """Overall first-stage F statistic and its p-value, from data or summary statistics."""
    if isinstance(data, ReducedFormFit):
        g = data.gamma_hat
        W = float(g @ np.linalg.solve(data.omega_gamma, g))
        F = W / data.p
        if data.n is not None and data.n > data.p + 1:
            pval = float(stats.f.sf(F, data.p, data.n - data.p - 1))
        else:
            pval = float(stats.chi2.sf(W, data.p))
        return {"F": F, "p_value": pval, "source": "summary"}
    F, pval = first_stage_f(prepare(data))
    return {"F": F, "p_value": pval, "source": "individual"}


def _input_block(data, kind):
    return {"kind": kind, "n": data.n, "p": data.p, "names": list(data.names)}


def _task(args):
    spec, data, seed, alpha = args
    rep, msgs, err = run_method_capturing(spec, data, seed=seed, alpha=alpha)
    return (None if rep is None else rep.to_dict(names=data.names)), msgs, err


def run_analysis(cfg: AnalysisConfig, jobs: int = 1):
    """Run every configured method; returns ``(report dict, forest rows, any_failed)``.

    A method that raises is recorded with its error string and the rest
    still run.  Output order follows the configured method list.
    """
    data = load_input(cfg.input, cfg.input_kind, cfg.n)
    for spec in cfg.methods:
        if cfg.input_kind == "summary" and not spec.info.summary_ok:
            raise MethodOptionError(f"{spec.name} needs individual-level data; the input is summary statistics")
    tasks = [(spec, data, cfg.seed, cfg.alpha) for spec in cfg.methods]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    entries, rows, failed = [], [], False
    for spec, (rep, msgs, err) in zip(cfg.methods, results):
        failed |= err is not None
        entries.append(
            {
                "id": str(spec),
                "label": spec.label,
                "status": "ok" if err is None else "error",
                "error": err,
                "warnings": msgs,
                "report": rep,
            }
        )
        rows.append(_forest_row(spec, rep))
    report = {
        "input": _input_block(data, cfg.input_kind),
        "first_stage": first_stage_summary(data),
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "methods": entries,
    }
    return report, rows, failed


def _num(x):
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _forest_row(spec: MethodSpec, rep):
    """``(label, estimate, lo, hi)``; lo/hi give the hull of the confidence set."""
    display = spec.info.display
    est = lo = hi = None
    if rep is not None:
        if display != "interval":
            est = rep["beta_hat"]
        if display != "point" and rep["ci"]:
            lo, hi = rep["ci"][0][0], rep["ci"][-1][1]
    return (spec.label, _num(est), _num(lo), _num(hi))


def forest_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "estimate", "lo", "hi"))
    w.writerows(rows)
    return buf.getvalue()


def report_json(report) -> str:
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def forest_svg(rows, path):
    """Render the forest table as a static SVG (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "invalidiv"
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(rows) + 1))
    for i, (label, est, lo, hi) in enumerate(rows):
        y = len(rows) - 1 - i
        if lo and hi:
            a, b = float(lo), float(hi)
            if math.isfinite(a) and math.isfinite(b):
                ax.plot([a, b], [y, y], color="black", lw=1.5)
        if est:
            ax.plot([float(est)], [y], "o", color="black", ms=4)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([r[0] for r in reversed(rows)])
    ax.set_xlabel("effect estimate")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_outputs(report, rows, out_dir, plot=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report), encoding="utf-8")
    (out / "forest.csv").write_text(forest_csv(rows), encoding="utf-8")
    if plot:
        forest_svg(rows, out / "forest.svg")


# ---------------------------------------------------------------------------
# Simulation


SCENARIO_KEYS = {
    "family": str,
    "n": int,
    "p": int,
    "beta": float,
    "gamma": _floats,
    "invalid": _ints,
    "magnitude": _floats,
    "C": _floats,
    "orthogonal": _bool,
    "norm": float,
    "confounding": float,
    "seed": int,
    "instrument_dist": str,
    "noiseless": _bool,
}
EXTRAS_KEYS = {
    "form": str,
    "strength": float,
    "theta": _floats,
    "eta": _floats,
    "eta0": float,
    "beta0": float,
    "alpha": float,
    "gamma0": float,
}
EXPERIMENT_KEYS = {"methods", "reps", "alpha"}


def load_scenario(path, seed=None):
    """Parse a scenario file into ``(SimScenario, method list, reps, alpha)``."""
    cp, lines, path = _read_ini(path)
    for sec in cp.sections():
        if sec not in ("scenario", "extras", "experiment"):
            raise ParseError(f"unknown section [{sec}]", _locate(lines, sec), path)
    if not cp.has_section("scenario"):
        raise ParseError("missing [scenario] section", None, path)

    def take(section, table):
        out = {}
        if not cp.has_section(section):
            return out
        for key in cp.options(section):
            if key not in table:
                raise ParseError(f"[{section}] unknown key {key!r}", _locate(lines, section, key), path)
            out[key] = _get(cp, lines, path, section, key, lambda s, f=table[key]: f(s.strip()))
        return out

    sc = take("scenario", SCENARIO_KEYS)
    extras = take("extras", EXTRAS_KEYS)
    pi_spec = {}
    for k in ("invalid", "magnitude", "C", "orthogonal", "norm"):
        if k in sc:
            pi_spec[k] = sc.pop(k)
    if "magnitude" in pi_spec and len(pi_spec["magnitude"]) == 1:
        pi_spec["magnitude"] = pi_spec["magnitude"][0]
    if "gamma" in sc:
        sc["gamma"] = tuple(sc["gamma"])
    if seed is not None:
        sc["seed"] = int(seed)
    try:
        scenario = SimScenario(pi_spec=pi_spec, extras=extras, **sc)
    except InvalidIVError as exc:
        raise ParseError(str(exc), _locate(lines, "scenario"), path) from None

    if not cp.has_section("experiment"):
        raise ParseError("missing [experiment] section", None, path)
    for key in cp.options("experiment"):
        if key not in EXPERIMENT_KEYS:
            raise ParseError(f"[experiment] unknown key {key!r}", _locate(lines, "experiment", key), path)
    reps = _get(cp, lines, path, "experiment", "reps", int, 1)
    alpha = _get(cp, lines, path, "experiment", "alpha", float, 0.05)
    raw = cp.get("experiment", "methods", fallback="")
    line = _locate(lines, "experiment", "methods")
    try:
        methods = [str(parse_method(m)) for m in _split_methods(raw)]
    except (UnknownMethod, MethodOptionError) as exc:
        raise ParseError(str(exc), line, path) from None
    if not methods:
        raise ParseError("[experiment] needs a non-empty 'methods' list", line, path)
    return scenario, methods, reps, alpha


# ---------------------------------------------------------------------------
# Entry point


def _parser():
    ap = argparse.ArgumentParser(prog="invalidiv", description="Causal effect estimation with possibly invalid instruments.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out-dir", default=".", help="directory for output files")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")

    a = sub.add_parser("analyze", help="run the configured methods on one dataset")
    a.add_argument("--input", default=None, help="CSV input (overrides the config)")
    a.add_argument("--input-kind", choices=("individual", "summary"), default=None)
    common(a)
    s = sub.add_parser("simulate", help="run a Monte Carlo experiment from a scenario file")
    common(s)
    v = sub.add_parser("validate-input", help="check that an input file parses and report its shape")
    v.add_argument("--input", required=True)
    v.add_argument("--input-kind", choices=("individual", "summary"), default="individual")
    v.add_argument("--n", type=int, default=None, help="sample size for summary input")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.verb == "analyze":
            cfg = load_analysis_config(
                args.config, {"input": args.input, "input_kind": args.input_kind, "seed": args.seed}
            )
            report, rows, failed = run_analysis(cfg, jobs=args.jobs)
            write_outputs(report, rows, args.out_dir, plot=cfg.plot)
            for entry in report["methods"]:
                if entry["error"]:
                    print(f"{entry['id']}: {entry['error']}", file=sys.stderr)
            return EXIT_PARTIAL if failed else EXIT_OK
        if args.verb == "simulate":
            scenario, methods, reps, alpha = load_scenario(args.config, seed=args.seed)
            table = run_experiment(scenario, methods, reps, jobs=args.jobs, alpha=alpha)
            out = Path(args.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            table.to_csv(out / "experiment.csv")
            failures = sum(r["failures"] for r in table.rows)
            if failures:
                print(f"{failures} method runs failed", file=sys.stderr)
            return EXIT_PARTIAL if failures else EXIT_OK
        data = load_input(args.input, args.input_kind, args.n)
        fs = first_stage_summary(data)
        print(f"kind={args.input_kind} n={data.n} p={data.p} first_stage_F={fs['F']:.6g}")
        return EXIT_OK
    except (InvalidIVError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
