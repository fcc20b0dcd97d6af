"""``upda gen-data|train|eval|report``: config-driven front end.

Exit codes: 0 success, 1 I/O or format error, 2 configuration error, 3 training diverged.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from upda.checkpoint import Checkpoint, CheckpointError
from upda.dataset import (
    ConfigurationError,
    ContractViolation,
    DatasetFormatError,
    DegenerateInputError,
    DomainConfig,
    build_domain,
    load_dataset,
    save_dataset,
    split_folds,
)
from upda.evaluation import (
    METHOD_TAGS,
    SCENARIOS,
    EvalReport,
    FoldResult,
    compare_methods,
    evaluate_predictions,
    fit_logistic,
    report_rows_csv,
)
from upda.train import TrainConfig, TrainingDiverged, predict, run_method

CONFIG_SCHEMA = 1
METHODS = {"noadapt": "NoAdapt", "diradapt": "DirAdapt", "upda": "UPDA"}
EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    source: DomainConfig
    target: DomainConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    scenario: str = "cross_distortion"
    methods: tuple[str, ...] = ("noadapt", "diradapt", "upda")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    k_folds: int = 4
    data_seed: int = 0
    out: str = "runs"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigurationError("experiment config must be a JSON object")
        if d.get("schema_version", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise ConfigurationError(f"unsupported config schema_version {d.get('schema_version')!r}")
        known = {"schema_version", "source", "target", "train", "scenario", "methods", "seeds", "k_folds",
                 "data_seed", "out"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment config keys: {sorted(unknown)}")
        for key in ("source", "target"):
            if key not in d:
                raise ConfigurationError(f"experiment config needs a {key!r} section")
        try:
            cfg = cls(
                source=DomainConfig.from_dict({"domain_tag": "source", **d["source"]}),
                target=DomainConfig.from_dict({"domain_tag": "target", "content_offset": 1000, **d["target"]}),
                train=TrainConfig.from_dict(d.get("train", {})),
                scenario=d.get("scenario", "cross_distortion"),
                methods=tuple(m.lower() for m in d.get("methods", ("noadapt", "diradapt", "upda"))),
                seeds=tuple(int(s) for s in d.get("seeds", (0, 1, 2, 3, 4))),
                k_folds=int(d.get("k_folds", 4)),
                data_seed=int(d.get("data_seed", 0)),
                out=str(d.get("out", "runs")),
            )
        except (TypeError, AttributeError) as exc:
            raise ConfigurationError(f"malformed experiment config: {exc}") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.source.validate()
        self.target.validate()
        self.train.validate()
        if self.source.domain_tag == self.target.domain_tag:
            raise ConfigurationError("source and target need different domain tags")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown scenario {self.scenario!r}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigurationError(f"unknown methods {bad}")
        if not self.seeds:
            raise ConfigurationError("seed list is empty")
        if not 2 <= self.k_folds <= self.target.n_groups:
            raise ConfigurationError("k_folds must lie in [2, target n_groups]")

    def to_dict(self) -> dict:
        return {
            "schema_version": CONFIG_SCHEMA,
            "source": self.source.to_dict(),
            "target": self.target.to_dict(),
            "train": self.train.to_dict(),
            "scenario": self.scenario,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "k_folds": self.k_folds,
            "data_seed": self.data_seed,
            "out": self.out,
        }


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_dict(d)


def _data_root(args) -> Path:
    return Path(args.data or os.environ.get("UPDA_DATA_DIR") or "data")


def _say(msg: str) -> None:
    print(msg, flush=True)


# --- commands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    seed = cfg.data_seed if args.seed is None else args.seed
    root = Path(args.out) if args.out else _data_root(args)
    for name, dcfg in (("source", cfg.source), ("target", cfg.target)):
        ds = build_domain(dcfg, seed)
        save_dataset(ds, root / name)
        mos = ds.labels()
        _say(f"{name}: {len(ds)} samples, {len(ds.groups)} groups, MOS [{mos.min():.3f}, {mos.max():.3f}] "
             f"-> {root / name}")
    return EXIT_OK


def _load_domains(args, cfg: ExperimentConfig):
    root = _data_root(args)
    source = load_dataset(Path(args.source) if args.source else root / "source")
    target = load_dataset(Path(args.target) if args.target else root / "target")
    return source, target


def _run_dir_name(method: str, seed: int, fold: int, train: TrainConfig) -> str:
    return f"{method}-seed{seed}-fold{fold}-{train.digest()[:8]}"


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    methods = [args.method.lower()] if args.method else list(cfg.methods)
    if any(m not in METHODS for m in methods):
        raise ConfigurationError(f"unknown method {args.method!r}")
    if args.target and methods == ["noadapt"]:
        print("warning: --target is ignored by noadapt (source-only training)", file=sys.stderr)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    folds_wanted = [args.fold] if args.fold is not None else list(range(cfg.k_folds))
    source, target = _load_domains(args, cfg)
    folds = split_folds(target, cfg.k_folds)
    out_root = Path(args.out or cfg.out)
    for seed in seeds:
        train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": seed})
        for k in folds_wanted:
            if not 0 <= k < len(folds):
                raise ConfigurationError(f"fold {k} out of range for k_folds={cfg.k_folds}")
            adapt_idx, test_idx = folds[k]
            for method in methods:
                run_dir = out_root / _run_dir_name(method, seed, k, train_cfg)
                _train_one(method, source, target.subset(adapt_idx), train_cfg, run_dir, cfg, k, adapt_idx, test_idx)
    return EXIT_OK


def _train_one(method, source, adapt, train_cfg, run_dir: Path, cfg, fold, adapt_idx, test_idx) -> None:
    run_dir.parent.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(run_dir) + ".lock", timeout=0):
            if (run_dir / "inference.ckpt").exists():
                raise FileExistsError(f"{run_dir} already holds a finished run; choose a fresh --out")
            resumed = (run_dir / "stage1.ckpt").exists()
            extra = {"experiment": cfg.to_dict(), "fold": fold, "adapt_indices": [int(i) for i in adapt_idx],
                     "test_indices": [int(i) for i in test_idx]}
            _, record = run_method(method, source, None if method == "noadapt" else adapt, train_cfg, run_dir, extra)
    except Timeout:
        raise OSError(f"{run_dir} is locked by another process") from None
    note = " (resumed from stage-1 checkpoint)" if resumed else ""
    _say(f"{METHODS[method]} seed={train_cfg.seed} fold={fold}: {record.wall_clock:.1f}s -> {run_dir}{note}")


def _eval_run(run_dir: Path, target) -> dict:
    config = json.loads((run_dir / "config.json").read_text())
    ckpt = Checkpoint.load(run_dir / "inference.ckpt")
    test_idx = np.asarray(config["test_indices"], dtype=int)
    pred = predict(ckpt, target.subset(test_idx).features())
    mos = target.subset(test_idx).labels()
    s, p, converged = evaluate_predictions(pred, mos)
    return {
        "run": str(run_dir), "scenario": config["experiment"]["scenario"], "method": config["method"],
        "fold": config["fold"], "seed": config["seed"], "srcc": s, "plcc": p, "fit_converged": converged,
        "pred": pred.tolist(), "mos": mos.tolist(),
    }


def cmd_eval(args) -> int:
    runs = [Path(r) for r in args.runs]
    if not runs:
        cfg = load_config(args.config) if args.config else None
        root = Path(args.runs_root or (cfg.out if cfg else "runs"))
        runs = sorted(p.parent for p in root.glob("*/inference.ckpt"))
        if not runs:
            raise FileNotFoundError(f"no finished runs under {root}")
    target = load_dataset(Path(args.target) if args.target else _data_root(args) / "target")
    rows = [_eval_run(r, target) for r in runs]
    for r in rows:
        _say(f"{r['method']:8s} seed={r['seed']} fold={r['fold']} SRCC={r['srcc']:.4f} PLCC={r['plcc']:.4f}")
    text = json.dumps({"rows": rows}, indent=1, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        if out.exists():
            raise FileExistsError(f"{out} exists; evaluation never overwrites earlier results")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _say(f"wrote {out}")
    return EXIT_OK


def _rows_to_reports(rows: list[dict]) -> list[EvalReport]:
    reports: dict[tuple[str, str], EvalReport] = {}
    for r in rows:
        key = (r["scenario"], r["method"])
        reports.setdefault(key, EvalReport(*key)).folds.append(
            FoldResult(r["fold"], r["seed"], r["srcc"], r["plcc"], r.get("fit_converged", True)))
    order = {m: i for i, m in enumerate(METHOD_TAGS)}
    return sorted(reports.values(), key=lambda rep: (rep.scenario, order.get(rep.method, 99), rep.method))


def cmd_report(args) -> int:
    rows = []
    for path in args.evals:
        rows += json.loads(Path(path).read_text())["rows"]
    if not rows:
        raise ConfigurationError("no evaluation rows to report")
    out = Path(args.out or "report")
    if (out / "report.csv").exists():
        raise FileExistsError(f"{out} already holds a report; choose a fresh --out")
    out.mkdir(parents=True, exist_ok=True)
    reports = _rows_to_reports(rows)
    summary = []
    for rep in reports:
        summary.append({"scenario": rep.scenario, "method": rep.method, "n": len(rep.folds),
                        "srcc_mean": rep.mean("srcc"), "srcc_std": rep.std("srcc"),
                        "plcc_mean": rep.mean("plcc"), "plcc_std": rep.std("plcc")})
        _say(f"{rep.scenario} {rep.method:8s} SRCC {rep.mean():.4f} ± {rep.std():.4f}  "
             f"PLCC {rep.mean('plcc'):.4f} ± {rep.std('plcc'):.4f}  ({len(rep.folds)} runs)")
    comparison = None
    if len({r.method for r in reports}) >= 2:
        try:
            comparison = json.loads(compare_methods(reports).to_json())
        except ContractViolation as exc:
            _say(f"comparison skipped: {exc}")
    (out / "report.csv").write_text(report_rows_csv(reports))
    (out / "report.json").write_text(json.dumps(
        {"rows": [row for rep in reports for row in rep.rows()], "summary": summary, "comparison": comparison},
        indent=1, sort_keys=True) + "\n")
    if args.plots:
        _plot(rows, out / "plots")
    _say(f"wrote {out / 'report.csv'} and {out / 'report.json'}")
    return EXIT_OK


def _plot(rows: list[dict], where: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    where.mkdir(parents=True, exist_ok=True)
    for r in rows:
        pred, mos = np.asarray(r["pred"]), np.asarray(r["mos"])
        fig, ax = plt.subplots(figsize=(4, 3.5))
        ax.scatter(pred, mos, s=12)
        if len(pred) >= 6:
            fit = fit_logistic(pred, mos)
            xs = np.linspace(pred.min(), pred.max(), 200)
            ax.plot(xs, fit(xs), color="C1")
        ax.set_xlabel("prediction")
        ax.set_ylabel("MOS")
        ax.set_title(f"{r['method']} seed {r['seed']} fold {r['fold']}  SRCC {r['srcc']:.3f}")
        fig.tight_layout()
        fig.savefig(where / f"{r['scenario']}-{r['method']}-seed{r['seed']}-fold{r['fold']}.png", dpi=100)
        plt.close(fig)


# --- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="upda", description="Progressive domain adaptation for point cloud quality")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment config (JSON)")
        sp.add_argument("--data", help="dataset root (default: $UPDA_DATA_DIR or ./data)")
        sp.add_argument("--out", help="output location")

    g = sub.add_parser("gen-data", help="generate source and target datasets")
    common(g)
    g.add_argument("--seed", type=int, help="data seed (default: config data_seed)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train noadapt | diradapt | upda")
    common(t)
    t.add_argument("--method", choices=sorted(METHODS), help="default: every method in the config")
    t.add_argument("--seed", type=int, help="default: every seed in the config")
    t.add_argument("--fold", type=int, help="default: every fold")
    t.add_argument("--source", help="source dataset directory")
    t.add_argument("--target", help="target dataset directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score finished runs on their held-out target fold")
    common(e, config_required=False)
    e.add_argument("runs", nargs="*", help="run directories (default: every run under the config's out)")
    e.add_argument("--runs-root", help="directory holding run directories")
    e.add_argument("--target", help="target dataset directory")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate evaluation files into report.csv / report.json")
    r.add_argument("evals", nargs="+", help="evaluation JSON files written by `upda eval --out`")
    r.add_argument("--out", help="report directory (default ./report)")
    r.add_argument("--plots", action="store_true", help="also write prediction-vs-MOS scatter plots")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, ContractViolation, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetFormatError, CheckpointError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
