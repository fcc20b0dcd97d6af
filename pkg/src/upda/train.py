"""Two-stage UPDA training plus the NoAdapt and DirAdapt baselines."""

from __future__ import annotations

import hashlib
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from upda.backbone import DTYPE, Backbone, build_backbone, init_params
from upda.checkpoint import Checkpoint, CheckpointError
from upda.daca import KernelConfig, RankingHead, loss_daca
from upda.dataset import ConfigurationError, DomainDataset, PointCloudSample
from upda.pffa import Discriminator, PffaHeads, RegressionHead, grad_reverse, grl_lambda, loss_pffa, mse

INFERENCE_GROUPS = ("G", "R")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    nu: float = 1.0
    mu: float = 0.8
    stage1_epochs: int = 50
    stage2_epochs: int = 50
    batch_size: int = 16
    optimizer: str = "adam"
    stage1_lr: float = 1e-3
    stage2_lr: float = 1e-5
    # freshly initialised stage-2 modules (fusion, R, D) start from scratch
    head_lr: float = 1e-3
    seed: int = 0
    grl_lambda: float | None = None
    kernel_multipliers: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    adv_label_convention: str = "paper"
    feature_dim: int = 128
    n_tokens: int = 8
    n_heads: int = 4
    rank_hidden: tuple[int, ...] = ()
    warmup_epochs: int = 1

    def validate(self) -> None:
        for name in ("stage1_lr", "stage2_lr", "head_lr"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigurationError("epoch counts must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (pairs need two samples)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.adv_label_convention not in ("paper", "conventional"):
            raise ConfigurationError(f"unknown label convention {self.adv_label_convention!r}")
        if self.feature_dim % self.n_tokens:
            raise ConfigurationError("feature_dim must be divisible by n_tokens")
        KernelConfig(tuple(self.kernel_multipliers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_multipliers"] = list(self.kernel_multipliers)
        d["rank_hidden"] = list(self.rank_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("kernel_multipliers", "rank_hidden"):
            if key in kw:
                kw[key] = tuple(kw[key])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    method: str
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0

    def log(self, **entry) -> None:
        self.epochs.append(entry)

    def curve(self, key: str, stage: str | None = None) -> list[float]:
        return [e[key] for e in self.epochs if key in e and (stage is None or e["stage"] == stage)]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def _rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())])


def _sub_seed(seed: int, stream: str) -> int:
    return int(_rng(seed, stream).integers(0, 2**31 - 1))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    return np.array_split(rng.permutation(n), math.ceil(n / size))


class _Cycler:
    """Endless reshuffled pass over ``range(n)``; used to match target to source batches."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng, self.queue = n, rng, np.empty(0, dtype=np.int64)

    def take(self, m: int) -> np.ndarray:
        while len(self.queue) < m:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[:m], self.queue[m:]
        return out


def _optimizer(kind: str, groups: list[dict]) -> torch.optim.Optimizer:
    if kind == "adam":
        return torch.optim.Adam(groups)
    return torch.optim.SGD(groups, momentum=0.9)


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def _step(opt: torch.optim.Optimizer, loss: torch.Tensor, record: RunRecord, where: str) -> None:
    if not torch.isfinite(loss):
        record.log(stage=where, diverged=True, loss=loss.item())
        raise TrainingDiverged(f"non-finite loss during {where}", record)
    opt.zero_grad()
    loss.backward()
    opt.step()


def _new_backbone(cfg: TrainConfig, source_stats: np.ndarray) -> Backbone:
    g = build_backbone(_sub_seed(cfg.seed, "G"), cfg.feature_dim)
    g.fit_scaler(source_stats)
    return g


def _meta(cfg: TrainConfig, method: str, stage: str) -> dict:
    return {"method": method, "stage": stage, "seed": cfg.seed, "config_hash": cfg.digest(),
            "feature_dim": cfg.feature_dim}


def train_stage1_daca(
    source: DomainDataset, target: DomainDataset, cfg: TrainConfig, record: RunRecord | None = None
) -> Checkpoint:
    """Fit G and the ranking head on L_D-rank + nu * L_D-MMD."""
    cfg.validate()
    if source.domain_tag == target.domain_tag:
        raise ConfigurationError("source and target must carry different domain tags")
    record = record or RunRecord("UPDA", cfg.seed, cfg.digest())
    xs, ys, xt = _tensor(source.features()), source.labels(), _tensor(target.features())
    g = _new_backbone(cfg, xs.numpy())
    rph = init_params(RankingHead(cfg.feature_dim, cfg.rank_hidden), _sub_seed(cfg.seed, "RPH"))
    opt = _optimizer(cfg.optimizer, [{"params": [*g.parameters(), *rph.parameters()], "lr": cfg.stage1_lr}])
    order, tgt = _rng(cfg.seed, "stage1-order"), _Cycler(len(xt), _rng(cfg.seed, "stage1-target"))
    kernel = KernelConfig(tuple(cfg.kernel_multipliers))
    for epoch in range(cfg.stage1_epochs):
        sums = np.zeros(3)
        batches = _batches(len(xs), cfg.batch_size, order)
        for b in batches:
            tb = tgt.take(len(b))
            out = loss_daca(g(xs[b]), ys[b], g(xt[tb]), rph, cfg.nu, kernel)
            _step(opt, out.total, record, "stage1")
            sums += [out.total.item(), out.rank.item(), out.mmd.item()]
        sums /= len(batches)
        record.log(stage="stage1", epoch=epoch, daca=sums[0], d_rank=sums[1], d_mmd=sums[2])
    return Checkpoint.from_modules({"G": g, "RPH": rph}, _meta(cfg, "UPDA", "stage1"))


def evaluate_daca(ckpt: Checkpoint, source: DomainDataset, target: DomainDataset, cfg: TrainConfig) -> float:
    """Full-batch L_DACA of a stage-1 checkpoint."""
    g = ckpt.load_into("G", Backbone(out_dim=cfg.feature_dim))
    rph = ckpt.load_into("RPH", RankingHead(cfg.feature_dim, cfg.rank_hidden))
    with torch.no_grad():
        out = loss_daca(g(_tensor(source.features())), source.labels(), g(_tensor(target.features())), rph,
                        cfg.nu, KernelConfig(tuple(cfg.kernel_multipliers)))
    return float(out.total)


def train_stage2_pffa(
    source: DomainDataset,
    target: DomainDataset,
    stage1: Checkpoint,
    cfg: TrainConfig,
    record: RunRecord | None = None,
) -> Checkpoint:
    """Fine-tune G with fusion, regression and the gated discriminator."""
    cfg.validate()
    record = record or RunRecord("UPDA", cfg.seed, cfg.digest())
    g = stage1.load_into("G", Backbone(out_dim=cfg.feature_dim))
    heads = init_params(PffaHeads(cfg.feature_dim, cfg.n_tokens, cfg.n_heads), _sub_seed(cfg.seed, "PFFA"))
    opt = _optimizer(cfg.optimizer, [
        {"params": list(g.parameters()), "lr": cfg.stage2_lr},
        {"params": list(heads.parameters()), "lr": cfg.head_lr},
    ])
    xs, ys, xt = _tensor(source.features()), source.labels(), _tensor(target.features())
    order, tgt = _rng(cfg.seed, "stage2-order"), _Cycler(len(xt), _rng(cfg.seed, "stage2-target"))
    steps_per_epoch = math.ceil(len(xs) / cfg.batch_size)
    total, step = cfg.stage2_epochs * steps_per_epoch, 0
    for epoch in range(cfg.stage2_epochs):
        force_h = 1.0 if epoch < cfg.warmup_epochs else None
        sums = np.zeros(4)
        gated = 0.0
        for b in _batches(len(xs), cfg.batch_size, order):
            tb = tgt.take(len(b))
            lam = cfg.grl_lambda if cfg.grl_lambda is not None else grl_lambda(step / total)
            out = loss_pffa(g(xs[b]), ys[b], g(xt[tb]), heads, cfg.mu, lam,
                            convention=cfg.adv_label_convention, force_h=force_h)
            _step(opt, out.total, record, "stage2")
            sums += [out.total.item(), out.quality.item(), out.disc.item(), lam]
            gated += float((out.h == 0).sum())
            step += 1
        sums /= steps_per_epoch
        record.log(stage="stage2", epoch=epoch, pffa=sums[0], quality=sums[1], disc=sums[2], lam=sums[3],
                   h_zero=gated, h_forced=force_h is not None)
    return Checkpoint.from_modules({"G": g, "fusion": heads.fusion, "R": heads.reg, "D": heads.disc},
                                   _meta(cfg, "UPDA", "final"))


def inference_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Keep only G and R; fusion and discriminators are training-time only."""
    out = ckpt.subset(INFERENCE_GROUPS)
    out.meta["stage"] = "inference"
    return out


def _supervised(
    source: DomainDataset,
    cfg: TrainConfig,
    method: str,
    target: DomainDataset | None,
    record: RunRecord,
) -> Checkpoint:
    xs, ys = _tensor(source.features()), source.labels()
    g = _new_backbone(cfg, xs.numpy())
    reg = init_params(RegressionHead(cfg.feature_dim), _sub_seed(cfg.seed, "R"))
    groups = [{"params": [*g.parameters(), *reg.parameters()], "lr": cfg.stage1_lr}]
    disc = None
    if target is not None:
        xt = _tensor(target.features())
        disc = init_params(Discriminator(cfg.feature_dim), _sub_seed(cfg.seed, "D"))
        groups.append({"params": list(disc.parameters()), "lr": cfg.stage1_lr})
        tgt = _Cycler(len(xt), _rng(cfg.seed, "diradapt-target"))
    opt = _optimizer(cfg.optimizer, groups)
    order = _rng(cfg.seed, "supervised-order")
    epochs = cfg.stage1_epochs + cfg.stage2_epochs
    steps_per_epoch = math.ceil(len(xs) / cfg.batch_size)
    total, step = epochs * steps_per_epoch, 0
    for epoch in range(epochs):
        sums = np.zeros(2)
        for b in _batches(len(xs), cfg.batch_size, order):
            f_s = g(xs[b])
            loss = mse(reg(f_s), ys[b])
            sums[0] += loss.item()
            if disc is not None:
                lam = cfg.grl_lambda if cfg.grl_lambda is not None else grl_lambda(step / total)
                f_t = g(xt[tgt.take(len(b))])
                d_s, d_t = disc(grad_reverse(f_s, lam)), disc(grad_reverse(f_t, lam))
                eps = 1e-7
                adv = -(torch.log(d_s + eps).mean() + torch.log(1.0 - d_t + eps).mean())
                sums[1] += adv.item()
                loss = loss + adv
            _step(opt, loss, record, method)
            step += 1
        sums /= steps_per_epoch
        record.log(stage=method, epoch=epoch, quality=sums[0], disc=sums[1])
    modules = {"G": g, "R": reg}
    if disc is not None:
        modules["D"] = disc
    return Checkpoint.from_modules(modules, _meta(cfg, method, "final"))


def train_noadapt(source: DomainDataset, cfg: TrainConfig, record: RunRecord | None = None) -> Checkpoint:
    """Source-only supervised training of G and R (never sees the target)."""
    cfg.validate()
    record = record or RunRecord("NoAdapt", cfg.seed, cfg.digest())
    return _supervised(source, cfg, "NoAdapt", None, record)


def train_diradapt(
    source: DomainDataset, target: DomainDataset, cfg: TrainConfig, record: RunRecord | None = None
) -> Checkpoint:
    """Supervised training plus a plain domain discriminator on raw G features through a GRL."""
    cfg.validate()
    if source.domain_tag == target.domain_tag:
        raise ConfigurationError("source and target must carry different domain tags")
    record = record or RunRecord("DirAdapt", cfg.seed, cfg.digest())
    return _supervised(source, cfg, "DirAdapt", target, record)


def train_upda(
    source: DomainDataset, target: DomainDataset, cfg: TrainConfig, record: RunRecord | None = None
) -> tuple[Checkpoint, Checkpoint]:
    record = record or RunRecord("UPDA", cfg.seed, cfg.digest())
    stage1 = train_stage1_daca(source, target, cfg, record)
    return stage1, train_stage2_pffa(source, target, stage1, cfg, record)


def load_inference_model(ckpt: Checkpoint) -> tuple[Backbone, RegressionHead]:
    try:
        w = ckpt.groups["G"]["fc3.weight"]
    except KeyError:
        raise CheckpointError("checkpoint lacks a feature extractor") from None
    g = ckpt.load_into("G", Backbone(out_dim=w.shape[0]))
    reg = ckpt.load_into("R", RegressionHead(w.shape[0]))
    return g, reg


def predict(ckpt: Checkpoint, samples: Iterable[PointCloudSample] | np.ndarray) -> np.ndarray:
    """q = R(G(x)) one sample at a time, so results never depend on batch size."""
    g, reg = load_inference_model(ckpt)
    stats = samples if isinstance(samples, np.ndarray) else np.stack([s.stat_vector for s in samples])
    x = _tensor(np.atleast_2d(stats))
    with torch.no_grad():
        return np.array([float(reg(g(row[None]))[0]) for row in x])


def write_run(
    run_dir: str | Path,
    cfg: TrainConfig,
    record: RunRecord,
    final: Checkpoint,
    stage1: Checkpoint | None = None,
    extra_config: dict | None = None,
) -> Path:
    """Write the standard run-directory layout."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {"train": cfg.to_dict(), "method": record.method, "seed": cfg.seed, **(extra_config or {})}
    (run_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    if stage1 is not None and not (run_dir / "stage1.ckpt").exists():
        record.checkpoints["stage1"] = str(stage1.save(run_dir / "stage1.ckpt"))
    record.checkpoints["final"] = str(final.save(run_dir / "final.ckpt"))
    record.checkpoints["inference"] = str(inference_checkpoint(final).save(run_dir / "inference.ckpt"))
    record.write_jsonl(run_dir / "log.jsonl")
    return run_dir


def run_method(
    method: str,
    source: DomainDataset,
    target: DomainDataset | None,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    extra_config: dict | None = None,
) -> tuple[Checkpoint, RunRecord]:
    """Train ``noadapt``, ``diradapt`` or ``upda``; optionally write a run directory."""
    key = method.lower()
    names = {"noadapt": "NoAdapt", "diradapt": "DirAdapt", "upda": "UPDA"}
    if key not in names:
        raise ConfigurationError(f"unknown method {method!r}")
    record = RunRecord(names[key], cfg.seed, cfg.digest())
    t0 = time.perf_counter()
    stage1 = None
    if key == "noadapt":
        final = train_noadapt(source, cfg, record)
    elif key == "diradapt":
        final = train_diradapt(source, _need(target), cfg, record)
    else:
        stage1_path = Path(run_dir) / "stage1.ckpt" if run_dir is not None else None
        if stage1_path is not None and stage1_path.exists():
            stage1 = Checkpoint.load(stage1_path)
        else:
            stage1 = train_stage1_daca(source, _need(target), cfg, record)
            if stage1_path is not None:
                stage1_path.parent.mkdir(parents=True, exist_ok=True)
                record.checkpoints["stage1"] = str(stage1.save(stage1_path))
        final = train_stage2_pffa(source, _need(target), stage1, cfg, record)
    record.wall_clock = time.perf_counter() - t0
    if run_dir is not None:
        write_run(run_dir, cfg, record, final, stage1, extra_config)
    return final, record


def _need(target: DomainDataset | None) -> DomainDataset:
    if target is None:
        raise ConfigurationError("this method needs an unlabeled target dataset")
    return target
