"""SRCC / PLCC metrics, the k-fold cross-domain protocol and method comparison."""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import rankdata

from upda.dataset import ContractViolation, DomainConfig, DomainDataset, build_domain, split_folds
from upda.train import TrainConfig, inference_checkpoint, predict, run_method

METHOD_TAGS = ("NoAdapt", "DirAdapt", "UPDA")
SCENARIOS = ("cross_distortion", "cross_dataset")


class UndefinedCorrelation(ValueError):
    pass


def pearson(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        raise UndefinedCorrelation("correlation of a constant vector is undefined")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def srcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    """Spearman correlation: Pearson correlation of average ranks."""
    if len(pred) != len(mos) or len(pred) < 3:
        raise ContractViolation("srcc needs two equal-length vectors of at least 3 entries")
    return pearson(rankdata(pred), rankdata(mos))


def logistic5(x, b1, b2, b3, b4, b5):
    with np.errstate(over="ignore"):
        return b1 * (0.5 - 1.0 / (1.0 + np.exp(b2 * (x - b3)))) + b4 * x + b5


@dataclass
class LogisticFit:
    beta: tuple[float, float, float, float, float]
    residual: float
    converged: bool

    def __call__(self, x) -> np.ndarray:
        return logistic5(np.asarray(x, dtype=np.float64), *self.beta)


def fit_logistic(pred: Sequence[float], mos: Sequence[float]) -> LogisticFit:
    """Least-squares five-parameter logistic fit from several starts.

    Predictions are standardised before fitting so the result does not depend
    on their affine scale; the reported betas are mapped back to raw units.
    """
    x, y = np.asarray(pred, dtype=np.float64), np.asarray(mos, dtype=np.float64)
    if len(x) != len(y) or len(x) < 6:
        raise ContractViolation("the logistic fit needs at least 6 paired points")
    m, s = x.mean(), x.std()
    if s == 0:
        return LogisticFit((0.0, 0.0, 0.0, 0.0, float(y.mean())), float(((y - y.mean()) ** 2).sum()), False)
    # affine copies of x differ in z only by roundoff; rounding makes them fit identically
    z = np.round((x - m) / s, 10)
    slope, intercept = np.polyfit(z, y, 1)
    span = float(np.ptp(y)) or 1.0
    starts = [[0.0, 1.0, 0.0, slope, intercept]]
    # the surface has near-step local minima, so sweep steepness and centre
    for b2 in (0.5, 1.0, 2.0, 4.0, -0.5, -1.0, -2.0, -4.0):
        for b3 in np.quantile(z, (0.25, 0.5, 0.75)):
            starts.append([span, b2, float(b3), 0.0, float(y.mean())])
            starts.append([span, b2, float(b3), slope, intercept])
    best = None
    for x0 in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = least_squares(lambda b: logistic5(z, *b) - y, x0, method="lm",
                                xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        cost = float((res.fun**2).sum())
        if np.all(np.isfinite(res.x)) and np.isfinite(cost) and (best is None or cost < best[1]):
            best = (res, cost)
    if best is None:
        return LogisticFit((0.0, 0.0, 0.0, 1.0, 0.0), float("nan"), False)
    res, cost = best
    b1, b2, b3, b4, b5 = res.x
    beta = (b1, b2 / s, m + s * b3, b4 / s, b5 - b4 * m / s)
    return LogisticFit(tuple(float(b) for b in beta), cost, bool(res.success))


def plcc_after_fit(pred: Sequence[float], mos: Sequence[float]) -> tuple[float, LogisticFit]:
    """PLCC between logistic-mapped predictions and MOS; falls back to raw PLCC if the fit fails."""
    fit = fit_logistic(pred, mos)
    if not fit.converged:
        return pearson(pred, mos), fit
    mapped = fit(pred)
    try:
        return pearson(mapped, mos), fit
    except UndefinedCorrelation:
        return pearson(pred, mos), LogisticFit(fit.beta, fit.residual, False)


# --- protocol -------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    seed: int
    srcc: float
    plcc: float
    fit_converged: bool = True
    adapt_ids: list[int] = field(default_factory=list)
    test_ids: list[int] = field(default_factory=list)


@dataclass
class EvalReport:
    scenario: str
    method: str
    folds: list[FoldResult] = field(default_factory=list)

    @property
    def srcc_values(self) -> np.ndarray:
        return np.array([f.srcc for f in self.folds])

    @property
    def plcc_values(self) -> np.ndarray:
        return np.array([f.plcc for f in self.folds])

    def seed_means(self, metric: str = "srcc") -> np.ndarray:
        """Per-seed averages over folds."""
        seeds = sorted({f.seed for f in self.folds})
        return np.array([np.mean([getattr(f, metric) for f in self.folds if f.seed == s]) for s in seeds])

    def mean(self, metric: str = "srcc") -> float:
        return float(np.mean([getattr(f, metric) for f in self.folds]))

    def std(self, metric: str = "srcc") -> float:
        means = self.seed_means(metric)
        return float(means.std()) if len(means) > 1 else 0.0

    def rows(self) -> list[dict]:
        return [{"scenario": self.scenario, "method": self.method, "fold": f.fold, "seed": f.seed,
                 "srcc": f.srcc, "plcc": f.plcc} for f in self.folds]


def evaluate_predictions(pred: np.ndarray, mos: np.ndarray) -> tuple[float, float, bool]:
    try:
        s = srcc(pred, mos)
    except UndefinedCorrelation:
        return float("nan"), float("nan"), False
    p, fit = plcc_after_fit(pred, mos)
    return s, p, fit.converged


@dataclass
class ProtocolConfig:
    source: DomainConfig
    target: DomainConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: str = "cross_distortion"
    methods: tuple[str, ...] = METHOD_TAGS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_folds: int = 4
    data_seed: int = 0


def cross_distortion_configs(
    kinds: Sequence[str], base: DomainConfig | None = None
) -> list[tuple[DomainConfig, DomainConfig]]:
    """Leave-one-distortion-out: each kind in turn is the target domain."""
    base = base or DomainConfig()
    out = []
    for held in kinds:
        src = DomainConfig(**{**base.__dict__, "domain_tag": "source",
                              "distortion_kinds": tuple(k for k in kinds if k != held)})
        tgt = DomainConfig(**{**base.__dict__, "domain_tag": "target", "distortion_kinds": (held,),
                              "content_offset": base.content_offset + 1000})
        out.append((src, tgt))
    return out


def run_protocol(cfg: ProtocolConfig, datasets: tuple[DomainDataset, DomainDataset] | None = None,
                 audit: list | None = None) -> list[EvalReport]:
    """Adapt on full source + target-train fold, score the held-out target fold.

    ``audit`` (if given) receives one ``(method, seed, fold, adapt_ids, test_ids)``
    tuple per training run with the target content ids seen on each side.
    """
    if cfg.scenario not in SCENARIOS:
        raise ContractViolation(f"unknown scenario {cfg.scenario!r}")
    source, target = datasets or (build_domain(cfg.source, cfg.data_seed), build_domain(cfg.target, cfg.data_seed))
    tmos = target.labels()
    tids = target.content_ids()
    folds = split_folds(target, cfg.k_folds)
    reports = {m: EvalReport(cfg.scenario, m) for m in cfg.methods}
    for seed in cfg.seeds:
        tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
        for k, (train_idx, test_idx) in enumerate(folds):
            adapt = target.subset(train_idx)
            adapt_ids = sorted(set(tids[train_idx].tolist()))
            test_ids = sorted(set(tids[test_idx].tolist()))
            test_stats = np.stack([target._samples[i].stat_vector for i in test_idx])
            for method in cfg.methods:
                ckpt, _ = run_method(method, source, None if method == "NoAdapt" else adapt, tcfg)
                pred = predict(inference_checkpoint(ckpt), test_stats)
                s, p, ok = evaluate_predictions(pred, tmos[test_idx])
                reports[method].folds.append(FoldResult(k, seed, s, p, ok, adapt_ids, test_ids))
                if audit is not None:
                    audit.append((method, seed, k, adapt_ids if method != "NoAdapt" else [], test_ids))
    return [reports[m] for m in cfg.methods]


# --- comparison -----------------------------------------------------------


@dataclass
class ComparisonTable:
    """Per-scenario mean SRCC/PLCC per method, deltas against baselines, and per-column best."""

    methods: list[str]
    rows: list[dict]

    def best(self, column: str) -> str:
        """Method with the largest value in ``column`` (first on ties)."""
        return self.methods[int(np.argmax([self._value(column, m) for m in self.methods]))]

    def _value(self, column: str, method: str) -> float:
        return float(np.mean([r[f"{method}_{column}"] for r in self.rows]))

    def to_json(self) -> str:
        return json.dumps({"methods": self.methods, "rows": self.rows}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonTable":
        d = json.loads(text)
        return cls(d["methods"], d["rows"])

    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else []

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns(), lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, methods: list[str]) -> "ComparisonTable":
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            rows.append({k: (v if k == "scenario" else float(v)) for k, v in r.items()})
        return cls(methods, rows)

    def bold_marks(self) -> dict[str, str]:
        """scenario -> {metric: best method} per scenario row."""
        marks = {}
        for r in self.rows:
            for metric in ("srcc", "plcc"):
                vals = [r[f"{m}_{metric}"] for m in self.methods]
                marks[(r["scenario"], metric)] = self.methods[int(np.argmax(vals))]
        return marks


def compare_methods(reports: Iterable[EvalReport], reference: str = "UPDA") -> ComparisonTable:
    reports = list(reports)
    by_scenario: dict[str, dict[str, EvalReport]] = {}
    for r in reports:
        by_scenario.setdefault(r.scenario, {})[r.method] = r
    methods = [m for m in METHOD_TAGS if any(m in d for d in by_scenario.values())]
    methods += sorted({r.method for r in reports} - set(methods))
    if len(methods) < 2:
        raise ContractViolation("comparison needs at least two methods")
    rows = []
    for scenario, d in by_scenario.items():
        if set(d) != set(methods):
            raise ContractViolation(f"scenario {scenario!r} lacks methods {sorted(set(methods) - set(d))}")
        row: dict = {"scenario": scenario}
        for m in methods:
            for metric in ("srcc", "plcc"):
                row[f"{m}_{metric}"] = d[m].mean(metric)
                row[f"{m}_{metric}_std"] = d[m].std(metric)
        if reference in methods:
            for m in methods:
                if m != reference:
                    for metric in ("srcc", "plcc"):
                        row[f"delta_{reference}_vs_{m}_{metric}"] = row[f"{reference}_{metric}"] - row[f"{m}_{metric}"]
        rows.append(row)
    return ComparisonTable(methods, rows)


def report_rows_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["scenario", "method", "fold", "seed", "srcc", "plcc"], lineterminator="\n")
    w.writeheader()
    for r in reports:
        for row in r.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
