"""Registry mapping method identifiers to estimators, with display labels and input requirements."""

from __future__ import annotations

import re
import warnings
import zlib
from dataclasses import dataclass, field

from .core import EstimateReport, IVDataset, IntervalUnion, ReducedFormFit, fit_reduced_form, prepare
from .errors import MethodOptionError, UnknownMethod
from .hetero import genius, misteri_fit
from .linear import adaptive_lasso, kclass_estimator, median_estimator, ols, sisvive, tsls
from .nonlinear import g_interaction, tsci
from .selection import cim, tsht
from .uniform import sampling_ci, searching_ci, union_ci


@dataclass(frozen=True)
class MethodInfo:
    """How a method is displayed and what it needs.

    ``display`` is ``point`` (estimate only), ``interval`` (confidence set
    only) or ``both``.  ``summary_ok`` marks methods that run on summary
    statistics alone.  ``label`` may contain ``{v}``.
    """

    name: str
    label: str
    display: str
    summary_ok: bool
    options: dict = field(default_factory=dict)
    needs_truth: bool = False


def _opt_int(x):
    return int(x)


def _opt_float(x):
    return float(x)


def _opt_str(x):
    return str(x).strip()


REGISTRY = {
    m.name: m
    for m in [
        MethodInfo("ols", "OLS", "both", False),
        MethodInfo("tsls", "TSLS", "both", False, {"cov_mode": _opt_str}),
        MethodInfo("tsls_oracle", "TSLS (oracle)", "both", False, {"cov_mode": _opt_str}, needs_truth=True),
        MethodInfo("median", "Median", "point", True),
        MethodInfo("sisvive", "SISVIVE", "point", False, {"lam": _opt_float, "folds": _opt_int}),
        MethodInfo("kclass", "k-class", "point", False, {"k": _opt_float}),
        MethodInfo("adaptive_lasso", "AdLasso", "both", False, {"level": _opt_float, "cov_mode": _opt_str}),
        MethodInfo("tsht", "TSHT", "both", True, {"cov_mode": _opt_str}),
        MethodInfo("cim", "CIM", "both", False, {"level": _opt_float, "cov_mode": _opt_str}),
        MethodInfo(
            "tsci",
            "TSCI",
            "both",
            False,
            {"learner": _opt_str, "split_fraction": _opt_float},
        ),
        MethodInfo("g_interaction", "G({v})", "both", False, {"v": _opt_int}),
        MethodInfo("genius", "GENIUS", "both", False, {"variant": _opt_str}),
        MethodInfo("misteri", "MiSTERI", "both", False, {"n_starts": _opt_int}),
        MethodInfo("searching", "Searching", "interval", True, {"cov_mode": _opt_str}),
        MethodInfo("sampling", "SS", "interval", True, {"m": _opt_int, "c_n": _opt_float, "cov_mode": _opt_str}),
        MethodInfo(
            "union",
            "Union({v})",
            "interval",
            False,
            {"v": _opt_int, "alpha_s": _opt_float, "alpha_t": _opt_float, "inner": _opt_str, "cov_mode": _opt_str},
        ),
    ]
}

REQUIRED_OPTIONS = {"g_interaction": ("v",), "union": ("v",)}

# The full comparison menu, in display order.
FOREST_MENU = (
    "ols",
    "tsls",
    "median",
    "sisvive",
    "kclass",
    "adaptive_lasso",
    "tsht",
    "cim",
    "tsci",
    "g_interaction(v=6)",
    "g_interaction(v=8)",
    "genius",
    "misteri",
    "sampling",
    "union(v=6)",
    "union(v=8)",
)

SPEC_PATTERN = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class MethodSpec:
    """A method identifier with validated options, written ``name(key=value, ...)``."""

    name: str
    options: tuple = ()

    @property
    def info(self) -> MethodInfo:
        return REGISTRY[self.name]

    @property
    def opts(self) -> dict:
        return dict(self.options)

    @property
    def label(self) -> str:
        return self.info.label.format(**self.opts)

    def __str__(self):
        if not self.options:
            return self.name
        return f"{self.name}(" + ", ".join(f"{k}={v}" for k, v in self.options) + ")"


def make_spec(name: str, options: dict | None = None) -> MethodSpec:
    """Validate ``name`` and ``options`` against the registry."""
    if name not in REGISTRY:
        raise UnknownMethod(f"unknown method {name!r}; choose from {', '.join(sorted(REGISTRY))}")
    info = REGISTRY[name]
    parsed = {}
    for key, raw in (options or {}).items():
        if key not in info.options:
            allowed = ", ".join(sorted(info.options)) or "none"
            raise MethodOptionError(f"{name}: unknown option {key!r} (allowed: {allowed})")
        try:
            parsed[key] = info.options[key](raw)
        except (TypeError, ValueError):
            raise MethodOptionError(f"{name}: cannot parse option {key}={raw!r}") from None
    for key in REQUIRED_OPTIONS.get(name, ()):
        if key not in parsed:
            raise MethodOptionError(f"{name}: option {key!r} is required")
    return MethodSpec(name, tuple(sorted(parsed.items())))


def parse_method(text) -> MethodSpec:
    """Parse ``"name"`` or ``"name(key=value, ...)"``; a MethodSpec passes through."""
    if isinstance(text, MethodSpec):
        return text
    match = SPEC_PATTERN.match(str(text))
    if not match:
        raise UnknownMethod(f"cannot parse method identifier {text!r}")
    name, body = match.groups()
    options = {}
    if body and body.strip():
        for part in body.split(","):
            if "=" not in part:
                raise MethodOptionError(f"{name}: option {part.strip()!r} must be key=value")
            k, v = part.split("=", 1)
            options[k.strip()] = v.strip()
    return make_spec(name, options)


def check_method(text) -> MethodSpec:
    return parse_method(text)


def method_seed(seed: int, spec: MethodSpec) -> int:
    """Seed for one method: the base seed offset by a stable hash of the identifier."""
    return (int(seed) + zlib.crc32(str(spec).encode())) % 2**32


def _interval_report(name, ci: IntervalUnion, diagnostics=None) -> EstimateReport:
    return EstimateReport(method=name, beta_hat=None, ci=ci, diagnostics=diagnostics or {})


def run_method(
    method,
    data: IVDataset | ReducedFormFit,
    seed: int = 0,
    alpha: float = 0.05,
    truth=None,
) -> EstimateReport:
    """Run one method on individual data or a summary-statistic fit.

    ``truth`` (anything with a ``valid_set`` attribute) is needed only by
    ``tsls_oracle``.  Warnings raised by the method propagate to the caller.
    """
    spec = parse_method(method)
    info = spec.info
    opts = spec.opts
    name = spec.name
    summary = isinstance(data, ReducedFormFit)
    if summary and not info.summary_ok:
        raise MethodOptionError(f"{name} needs individual-level data, got summary statistics")
    if info.needs_truth and truth is None:
        raise MethodOptionError(f"{name} needs the true valid set")
    rseed = method_seed(seed, spec)
    cov_mode = opts.get("cov_mode", "robust")
    raw = data  # estimators that read the original scale
    if not summary:
        data = prepare(data)

    def rf():
        return data if summary else fit_reduced_form(data, cov_mode)

    if name == "ols":
        rep = ols(data, alpha=alpha)
    elif name == "tsls":
        rep = tsls(data, range(data.p), cov_mode=cov_mode, alpha=alpha)
    elif name == "tsls_oracle":
        rep = tsls(data, truth.valid_set, cov_mode=cov_mode, alpha=alpha)
    elif name == "median":
        rep = median_estimator(rf())
    elif name == "sisvive":
        rep = sisvive(data, lam=opts.get("lam"), seed=rseed, folds=opts.get("folds", 10))
    elif name == "kclass":
        rep = kclass_estimator(data, k=opts.get("k"))
    elif name == "adaptive_lasso":
        rep = adaptive_lasso(data, level=opts.get("level"), cov_mode=cov_mode, alpha=alpha)
    elif name == "tsht":
        rep = tsht(rf(), alpha=alpha, dataset=None if summary else data, cov_mode=cov_mode)
    elif name == "cim":
        rep = cim(data, level=opts.get("level"), cov_mode=cov_mode, alpha=alpha)
    elif name == "tsci":
        rep = tsci(
            data,
            learner=opts.get("learner", "basis_spline"),
            split_fraction=opts.get("split_fraction", 0.5),
            seed=rseed,
            alpha=alpha,
        )
    elif name == "g_interaction":
        rep = g_interaction(raw, opts["v"], alpha=alpha)
    elif name == "genius":
        rep = genius(data, variant=opts.get("variant", "gmm_mean"), alpha=alpha)
    elif name == "misteri":
        rep = misteri_fit(raw, seed=rseed, n_starts=opts.get("n_starts", 5), alpha=alpha)
    elif name == "searching":
        rep = _interval_report(name, searching_ci(rf(), alpha))
    elif name == "sampling":
        rep = _interval_report(
            name,
            sampling_ci(rf(), alpha, m=opts.get("m", 1000), c_n=opts.get("c_n"), seed=rseed),
        )
    elif name == "union":
        a_s = opts.get("alpha_s", alpha / 5)
        a_t = opts.get("alpha_t", alpha - a_s)
        rep = _interval_report(
            name,
            union_ci(data, opts["v"], alpha_s=a_s, alpha_t=a_t, inner=opts.get("inner", "wald"), cov_mode=cov_mode),
            {"v": opts["v"], "alpha_s": a_s, "alpha_t": a_t},
        )
    else:  # pragma: no cover - registry and dispatch are kept in sync
        raise UnknownMethod(name)
    return rep


def run_method_capturing(method, data, seed=0, alpha=0.05, truth=None):
    """Run a method, returning ``(report or None, warning messages, error string or None)``."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            rep = run_method(method, data, seed=seed, alpha=alpha, truth=truth)
            err = None
        except Exception as exc:
            rep, err = None, f"{type(exc).__name__}: {exc}"
    msgs = []
    for w in caught:
        msg = f"{w.category.__name__}: {w.message}"
        if msg not in msgs:
            msgs.append(msg)
    return rep, msgs, err
