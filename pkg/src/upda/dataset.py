"""Synthetic point-cloud quality datasets with controllable domain shift.

Pristine shapes are sampled from a few analytic families, degraded along
six-level distortion ladders and scored by a deterministic reference-based
oracle. Scores are rescaled per domain to ``[0, 10]``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHAPE_FAMILIES = ("sphere", "torus", "cube_shell", "gaussian_blob")
BASE_KINDS = ("color_noise", "geometry_gaussian_noise", "downsample", "quantize")
DOMAIN_TAGS = ("source", "target")
MIN_POINTS = 64
N_LEVELS = 6

SCHEMA_VERSION = 1
MAGIC = b"PCQ1"
_HEADER = struct.Struct("<4sII")


class ConfigurationError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ContractViolation(ValueError):
    pass


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, path: str | Path, offset: int):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _split_kind(kind: str) -> tuple[str, ...]:
    if kind == "none":
        return ()
    parts = tuple(kind.split("+"))
    if len(parts) > 2 or len(set(parts)) != len(parts) or any(p not in BASE_KINDS for p in parts):
        raise ConfigurationError(f"unknown distortion kind {kind!r}")
    return parts


@dataclass(frozen=True)
class DistortionSpec:
    """Distortion kind (a base kind, ``none``, or ``a+b``) and intensity level."""

    kind: str = "none"
    intensity: int = 0

    def __post_init__(self):
        parts = _split_kind(self.kind)
        if parts and not 1 <= self.intensity <= N_LEVELS:
            raise ConfigurationError(f"intensity must be in 1..{N_LEVELS}, got {self.intensity}")

    @property
    def components(self) -> tuple[str, ...]:
        return _split_kind(self.kind)


@dataclass(eq=False)
class PointCloudSample:
    points: np.ndarray
    colors: np.ndarray
    mos: float
    content_id: int
    distortion: DistortionSpec = field(default_factory=DistortionSpec)
    domain_tag: str = "source"

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ContractViolation(f"points must be N x 3, got {self.points.shape}")
        if self.colors.shape != self.points.shape:
            raise ContractViolation("colors must match points in shape")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigurationError(f"unknown domain tag {self.domain_tag!r}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @cached_property
    def stat_vector(self) -> np.ndarray:
        # local import: backbone depends on this module
        from upda.backbone import extract_raw_features

        return extract_raw_features(self)

    def equals(self, other: "PointCloudSample") -> bool:
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.colors, other.colors)
            and self.mos == other.mos
            and self.content_id == other.content_id
            and self.distortion == other.distortion
            and self.domain_tag == other.domain_tag
        )


class DomainDataset:
    """Samples of one domain plus their content groups.

    ``reads`` counts calls that hand sample data out (:meth:`features`,
    :meth:`labels`, iteration, indexing) so callers can audit that a
    dataset was never touched.
    """

    def __init__(self, samples: Sequence[PointCloudSample], domain_tag: str):
        if not samples:
            raise ContractViolation("a domain needs at least one sample")
        if domain_tag not in DOMAIN_TAGS:
            raise ConfigurationError(f"unknown domain tag {domain_tag!r}")
        self._samples = list(samples)
        self.domain_tag = domain_tag
        groups: dict[int, list[int]] = {}
        for i, s in enumerate(self._samples):
            groups.setdefault(int(s.content_id), []).append(i)
        self.groups = dict(sorted(groups.items()))
        self.reads = 0

    @property
    def samples(self) -> list[PointCloudSample]:
        self.reads += 1
        return self._samples

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, i: int) -> PointCloudSample:
        self.reads += 1
        return self._samples[i]

    def __iter__(self) -> Iterator[PointCloudSample]:
        self.reads += 1
        return iter(self._samples)

    def features(self) -> np.ndarray:
        self.reads += 1
        return np.stack([s.stat_vector for s in self._samples])

    def labels(self) -> np.ndarray:
        self.reads += 1
        return np.array([s.mos for s in self._samples], dtype=np.float64)

    def content_ids(self) -> np.ndarray:
        return np.array([s.content_id for s in self._samples], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "DomainDataset":
        return DomainDataset([self._samples[i] for i in indices], self.domain_tag)

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.domain_tag == other.domain_tag
            and len(self) == len(other)
            and self.groups == other.groups
            and all(a.equals(b) for a, b in zip(self._samples, other._samples))
        )


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in keys]))


def _key(text: str) -> int:
    return zlib.crc32(text.encode())


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _surface(shape_family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if shape_family == "sphere":
        v = rng.standard_normal((n, 3))
        return 0.5 * v / np.linalg.norm(v, axis=1, keepdims=True)
    if shape_family == "torus":
        major, minor = 0.3, 0.12
        u, v = rng.uniform(0, 2 * np.pi, (2, n))
        ring = major + minor * np.cos(v)
        return np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)])
    if shape_family == "cube_shell":
        half = 0.4
        p = rng.uniform(-half, half, (n, 3))
        face = rng.integers(0, 3, n)
        p[np.arange(n), face] = half * rng.choice([-1.0, 1.0], n)
        return p
    if shape_family == "gaussian_blob":
        return np.clip(0.15 * rng.standard_normal((n, 3)), -0.5, 0.5)
    raise ConfigurationError(f"unknown shape family {shape_family!r}; expected one of {SHAPE_FAMILIES}")


def _color_field(points: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # smooth per-content color pattern: a few random plane waves per channel
    freq = rng.uniform(2.0, 6.0, (3, 3)) * rng.choice([-1.0, 1.0], (3, 3))
    phase = rng.uniform(0, 2 * np.pi, 3)
    base = rng.uniform(0.3, 0.7, 3)
    return np.clip(base + 0.25 * np.sin(points @ freq + phase), 0.0, 1.0)


def generate_pristine(
    content_id: int, n_points: int, shape_family: str, seed: int = 0, domain_tag: str = "source"
) -> PointCloudSample:
    """Sample a pristine, colored reference cloud (MOS 10)."""
    if n_points < MIN_POINTS:
        raise DegenerateInputError(f"n_points must be >= {MIN_POINTS}")
    if shape_family not in SHAPE_FAMILIES:
        raise ConfigurationError(f"unknown shape family {shape_family!r}; expected one of {SHAPE_FAMILIES}")
    rng = _rng(seed, content_id, _key(shape_family), n_points)
    rotation = _random_rotation(rng)
    points = _surface(shape_family, n_points, rng) @ rotation.T
    colors = _color_field(points, rng)
    return PointCloudSample(points, colors, 10.0, content_id, DistortionSpec(), domain_tag)


def geometry_sigma(level: int) -> float:
    return 0.002 * 2.0**level


def color_sigma(level: int) -> float:
    return 0.008 * 2.0**level


def quantize_pitch(level: int) -> float:
    return 0.004 * 2.0**level


def _apply_one(points, colors, kind: str, level: int, rng: np.random.Generator):
    # one draw per (content, kind) shared by all levels: the ladder only rescales
    # it, so stronger levels are strictly worse versions of weaker ones
    if kind == "color_noise":
        colors = np.clip(colors + color_sigma(level) * rng.standard_normal(colors.shape), 0.0, 1.0)
    elif kind == "geometry_gaussian_noise":
        points = points + geometry_sigma(level) * rng.standard_normal(points.shape)
    elif kind == "downsample":
        n = points.shape[0]
        if n < MIN_POINTS:
            raise DegenerateInputError(f"cannot downsample a cloud of {n} points")
        keep = max(n >> level, MIN_POINTS)
        idx = np.sort(rng.permutation(n)[:keep])
        points, colors = points[idx], colors[idx]
    elif kind == "quantize":
        pitch = quantize_pitch(level)
        points = np.round(points / pitch) * pitch
    return points, colors


def apply_distortion(sample: PointCloudSample, spec: DistortionSpec, seed: int = 0) -> PointCloudSample:
    """Return a new sample degraded by ``spec``; the input is left untouched."""
    points, colors = sample.points.copy(), sample.colors.copy()
    parts = spec.components
    for kind in parts:
        rng = _rng(seed, sample.content_id, _key(kind))
        points, colors = _apply_one(points, colors, kind, spec.intensity, rng)
    if points.shape[0] < MIN_POINTS:
        raise DegenerateInputError(f"distortion left {points.shape[0]} < {MIN_POINTS} points")
    applied = spec if parts else sample.distortion
    return PointCloudSample(points, colors, sample.mos, sample.content_id, applied, sample.domain_tag)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class OracleConstants:
    geometry: float = 4.0
    color: float = 2.0
    density: float = 1.0


def oracle_errors(sample: PointCloudSample, reference: PointCloudSample) -> tuple[float, float, float]:
    """(geometry, color, density) errors of ``sample`` against ``reference``.

    Brute-force nearest neighbours in both directions.
    """
    if sample.content_id != reference.content_id:
        raise ContractViolation("oracle needs a reference of the same content")
    d = pairwise_sq_dists(sample.points, reference.points)
    nn_fwd, nn_bwd = d.argmin(axis=1), d.argmin(axis=0)
    # matched distances by direct differencing: exact zero for identical points
    d_fwd = ((sample.points - reference.points[nn_fwd]) ** 2).sum(axis=1)
    d_bwd = ((reference.points - sample.points[nn_bwd]) ** 2).sum(axis=1)
    geom = float(np.sqrt(0.5 * (d_fwd.mean() + d_bwd.mean())))
    color = float(np.sqrt(((sample.colors - reference.colors[nn_fwd]) ** 2).mean()))
    density = float(abs(np.log(sample.n_points / reference.n_points)))
    return geom, color, density


def oracle_mos(
    sample: PointCloudSample, reference: PointCloudSample, constants: OracleConstants = OracleConstants()
) -> float:
    geom, color, density = oracle_errors(sample, reference)
    return float(10.0 * np.exp(-constants.geometry * geom - constants.color * color - constants.density * density))


@dataclass
class DomainConfig:
    domain_tag: str = "source"
    shape_families: tuple[str, ...] = ("sphere",)
    distortion_kinds: tuple[str, ...] = ("color_noise",)
    levels: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    n_groups: int = 4
    n_points: int = 1024
    content_offset: int = 0
    oracle: OracleConstants = field(default_factory=OracleConstants)

    def to_dict(self) -> dict:
        return {
            "domain_tag": self.domain_tag,
            "shape_families": list(self.shape_families),
            "distortion_kinds": list(self.distortion_kinds),
            "levels": list(self.levels),
            "n_groups": self.n_groups,
            "n_points": self.n_points,
            "content_offset": self.content_offset,
            "oracle": {"geometry": self.oracle.geometry, "color": self.oracle.color, "density": self.oracle.density},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        known = {"domain_tag", "shape_families", "distortion_kinds", "levels", "n_groups", "n_points",
                 "content_offset", "oracle"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown domain config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("shape_families", "distortion_kinds", "levels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "oracle" in kw:
            kw["oracle"] = OracleConstants(**kw["oracle"])
        return cls(**kw)

    def validate(self) -> None:
        if self.domain_tag not in DOMAIN_TAGS:
            raise ConfigurationError(f"unknown domain tag {self.domain_tag!r}")
        if not self.distortion_kinds:
            raise ConfigurationError("distortion kind list is empty")
        for kind in self.distortion_kinds:
            if not _split_kind(kind):
                raise ConfigurationError("'none' is not a distortion ladder")
        if not self.shape_families:
            raise ConfigurationError("shape family list is empty")
        for fam in self.shape_families:
            if fam not in SHAPE_FAMILIES:
                raise ConfigurationError(f"unknown shape family {fam!r}")
        if not self.levels or any(not 1 <= lv <= N_LEVELS for lv in self.levels):
            raise ConfigurationError(f"levels must be a nonempty subset of 1..{N_LEVELS}")
        if self.n_groups < 1:
            raise ConfigurationError("n_groups must be >= 1")
        if self.n_points < MIN_POINTS:
            raise ConfigurationError(f"n_points must be >= {MIN_POINTS}")


def build_domain(config: DomainConfig, seed: int = 0) -> DomainDataset:
    """Generate every (group, kind, level) sample and rescale MOS to [0, 10]."""
    config.validate()
    samples, raw = [], []
    for g in range(config.n_groups):
        content_id = config.content_offset + g
        family = config.shape_families[g % len(config.shape_families)]
        ref = generate_pristine(content_id, config.n_points, family, seed, config.domain_tag)
        for kind in config.distortion_kinds:
            for level in config.levels:
                s = apply_distortion(ref, DistortionSpec(kind, level), seed)
                raw.append(oracle_mos(s, ref, config.oracle))
                samples.append(s)
    raw = np.asarray(raw)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        raise DegenerateInputError("all oracle scores are equal; cannot rescale")
    scaled = (raw - lo) / (hi - lo) * 10.0
    for s, m in zip(samples, scaled):
        s.mos = float(m)
    return DomainDataset(samples, config.domain_tag)


def split_folds(dataset: DomainDataset, k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Group-wise k-fold split: content groups, not samples, are dealt to folds."""
    group_ids = list(dataset.groups)
    if not 1 < k <= len(group_ids):
        raise ConfigurationError(f"k must be in 2..{len(group_ids)} (number of groups), got {k}")
    folds = []
    for test_groups in np.array_split(np.arange(len(group_ids)), k):
        test_set = {group_ids[g] for g in test_groups}
        test = sorted(i for gid in test_set for i in dataset.groups[gid])
        train = sorted(i for gid, idx in dataset.groups.items() if gid not in test_set for i in idx)
        folds.append((np.asarray(train, dtype=np.int64), np.asarray(test, dtype=np.int64)))
    return folds


# --- serialization --------------------------------------------------------


def _sample_bytes(s: PointCloudSample) -> bytes:
    return _HEADER.pack(MAGIC, s.n_points, 0) + s.points.astype("<f8").tobytes() + s.colors.astype("<f8").tobytes()


def _parse_sample_bytes(blob: bytes, path: Path) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) < _HEADER.size:
        raise DatasetFormatError("truncated header", path, len(blob))
    magic, n, _flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", path, 0)
    need = _HEADER.size + 2 * n * 3 * 8
    if len(blob) != need:
        raise DatasetFormatError(f"expected {need} bytes for {n} points, found {len(blob)}", path,
                                 min(len(blob), need))
    body = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    return body[: 3 * n].reshape(n, 3).copy(), body[3 * n:].reshape(n, 3).copy()


def save_dataset(dataset: DomainDataset, path: str | Path) -> None:
    """Write ``manifest.json`` plus one ``.pcq`` binary per sample."""
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset._samples):
        name = f"samples/{i:05d}.pcq"
        (root / name).write_bytes(_sample_bytes(s))
        entries.append({
            "file": name,
            "mos": repr(float(s.mos)),
            "content_id": int(s.content_id),
            "distortion": {"kind": s.distortion.kind, "intensity": s.distortion.intensity},
            "n_points": s.n_points,
        })
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "domain_tag": dataset.domain_tag,
        "groups": {str(k): v for k, v in dataset.groups.items()},
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> DomainDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    try:
        text = mpath.read_bytes().decode("utf-8")
        manifest = json.loads(text)
    except UnicodeDecodeError as exc:
        raise DatasetFormatError("manifest is not UTF-8", mpath, exc.start) from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(exc.msg, mpath, len(text[: exc.pos].encode())) from None
    try:
        if manifest["schema_version"] != SCHEMA_VERSION:
            raise DatasetFormatError(f"unsupported schema version {manifest['schema_version']}", mpath, 0)
        tag = manifest["domain_tag"]
        samples = []
        for entry in manifest["samples"]:
            spath = root / entry["file"]
            points, colors = _parse_sample_bytes(spath.read_bytes(), spath)
            if points.shape[0] != entry["n_points"]:
                raise DatasetFormatError("point count disagrees with manifest", spath, 4)
            spec = DistortionSpec(entry["distortion"]["kind"], entry["distortion"]["intensity"])
            samples.append(PointCloudSample(points, colors, float(entry["mos"]), int(entry["content_id"]), spec, tag))
        groups = {int(k): v for k, v in manifest["groups"].items()}
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"manifest missing or malformed field: {exc}", mpath, 0) from None
    dataset = DomainDataset(samples, tag)
    if dataset.groups != groups:
        raise DatasetFormatError("group map disagrees with sample metadata", mpath, 0)
    return dataset
