"""Label/feature ingestion, subject-wise folds and the synthetic generator.

Synthetic data model
--------------------
Each sample shows at most one expression template, chosen with the
template's ``rate`` (no template with the remaining probability).  The
template's first AU (its anchor) is switched on and every other member
switches on independently with probability ``coactivation``.  Every AU may
also fire spontaneously with probability ``background``.  Finally, for each
exclusion pair ``(a, b)`` with both AUs on, ``b`` is switched off.

Features are rendered on a 14×14 grid: Gaussian noise of scale ``noise``
everywhere plus ``signal`` added to the AU's own channel inside both of its
6×6 crop windows.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numeric as nm
from .errors import ConfigurationError, InputError, ParseError, ValidationError
from .graph import EdgeStats, LabelTable
from .regional import (CROP, GRID, INPUT_SIZE, FeatureStack, RegionEntry, RegionSpec,
                       crop_origin)

logger = logging.getLogger(__name__)

MAX_INTENSITY = 5


# ---------------------------------------------------------------------------
# Label CSV
# ---------------------------------------------------------------------------

def binarize_intensity(row, c_level: int = 2) -> np.ndarray:
    """1 where intensity >= c_level; intensities must lie in 0..5."""
    arr = np.asarray(row)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_INTENSITY):
        raise ValidationError(f"intensities must lie in 0..{MAX_INTENSITY}")
    return (arr >= c_level).astype(np.int8)


def _parse_au_header(header: list[str], lineno: int) -> list[int]:
    if header[:2] != ["subject", "frame"]:
        raise ParseError("header must start with 'subject,frame'", f"line {lineno}")
    ids = []
    for col in header[2:]:
        if not col.startswith("AU") or not col[2:].isdigit():
            raise ParseError(f"bad AU column {col!r}", f"line {lineno}")
        ids.append(int(col[2:]))
    return ids


def parse_labels(text: str, au_ids: Sequence[int] | None = None, intensity: bool = False,
                 c_level: int = 2) -> LabelTable:
    """Parse ``subject,frame,AU<k>,...`` CSV text (LF or CRLF line endings).

    With ``intensity=True`` cells hold 0..5 and are binarized at ``c_level``.
    ``au_ids`` selects and orders columns; a requested AU that is absent is an
    error naming the column.
    """
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty label file", "line 1") from None
    file_ids = _parse_au_header([h.strip() for h in header], 1)
    if au_ids is None:
        au_ids = sorted(file_ids)
    for au in au_ids:
        if au not in file_ids:
            raise ParseError(f"missing column AU{au}", "line 1")
    cols = [file_ids.index(a) for a in au_ids]
    allowed = range(MAX_INTENSITY + 1) if intensity else (0, 1)
    subjects, frames, rows = [], [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(rec)}", f"line {lineno}")
        vals = []
        for k in cols:
            cell = rec[2 + k].strip()
            try:
                v = int(cell)
            except ValueError:
                v = None
            if v not in allowed:
                raise ParseError(f"bad label {cell!r} in column AU{file_ids[k]}", f"line {lineno}")
            vals.append(v)
        subjects.append(rec[0].strip())
        frames.append(rec[1].strip())
        rows.append(vals)
    if not rows:
        raise InputError("label file has no data rows")
    arr = np.array(rows)
    if intensity:
        arr = binarize_intensity(arr, c_level)
    return LabelTable(list(au_ids), arr, subjects, frames)


def load_labels(path, au_ids=None, intensity: bool = False, c_level: int = 2) -> LabelTable:
    with open(path, newline="") as fh:
        return parse_labels(fh.read(), au_ids, intensity, c_level)


def labels_to_csv(labels: LabelTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "frame"] + [f"AU{a}" for a in labels.au_ids])
    subjects = labels.subjects or ["0"] * labels.num_samples
    frames = labels.frames or [str(i) for i in range(labels.num_samples)]
    for s, f, row in zip(subjects, frames, labels.rows):
        w.writerow([s, f] + [int(v) for v in row])
    return buf.getvalue()


def write_labels(path, labels: LabelTable) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(labels_to_csv(labels))


# ---------------------------------------------------------------------------
# Folds and manifests
# ---------------------------------------------------------------------------

def make_folds(subjects: Sequence[str], k: int = 3, seed: int = 0) -> dict[str, int]:
    """Shuffle unique subjects with a seeded generator and deal them round-robin."""
    unique = sorted(set(subjects))
    if len(unique) < k:
        raise InputError(f"{len(unique)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(unique))
    return {unique[j]: pos % k for pos, j in enumerate(order)}


@dataclass
class DatasetManifest:
    name: str
    au_ids: list[int]
    folds: dict[str, int]
    samples: list[dict]
    labels: str = "labels.csv"
    regions: str | None = "regions.json"
    scale_channels: list[int] | None = None
    fold_seed: int | None = None
    root: Path = field(default=Path("."), repr=False)

    def to_obj(self) -> dict:
        obj = {"name": self.name, "au_ids": self.au_ids, "folds": self.folds,
               "samples": self.samples, "labels": self.labels, "regions": self.regions}
        if self.scale_channels is not None:
            obj["scale_channels"] = self.scale_channels
        if self.fold_seed is not None:
            obj["fold_seed"] = self.fold_seed
        return obj

    def to_json(self) -> str:
        return json.dumps(self.to_obj(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, root=".") -> "DatasetManifest":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
        for key in ("name", "au_ids", "samples"):
            if key not in obj:
                raise ParseError(f"missing key {key!r}", "$")
        for k, s in enumerate(obj["samples"]):
            for key in ("id", "subject", "labels_row_index", "features"):
                if key not in s:
                    raise ParseError(f"missing key {key!r}", f"$.samples[{k}]")
        return cls(name=obj["name"], au_ids=[int(a) for a in obj["au_ids"]],
                   folds={str(s): int(f) for s, f in obj.get("folds", {}).items()},
                   samples=obj["samples"], labels=obj.get("labels", "labels.csv"),
                   regions=obj.get("regions"), scale_channels=obj.get("scale_channels"),
                   fold_seed=obj.get("fold_seed"), root=Path(root))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_json(path.read_text(), root=path.parent)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_folds(self, k: int = 3, seed: int = 0) -> "DatasetManifest":
        folds = make_folds([s["subject"] for s in self.samples], k, seed)
        return DatasetManifest(self.name, self.au_ids, folds, self.samples, self.labels,
                               self.regions, self.scale_channels, seed, self.root)


class _TensorCache:
    def __init__(self):
        self._cache: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = nm.load_tensor(path)
        return self._cache[path]


def load_features(entry: dict, root=".", scale_channels=None, cache=None) -> FeatureStack:
    """Load one sample's feature stack.

    ``features`` is a path to a C×14×14 tensor, ``path#k`` selecting slice k
    of an N×C×14×14 tensor, or a list of such paths (one per scale group).
    """
    cache = cache or _TensorCache()
    refs = entry["features"]
    refs = refs if isinstance(refs, list) else [refs]
    maps = []
    for ref in refs:
        path, _, index = str(ref).partition("#")
        arr = cache.get(Path(root) / path)
        if index:
            arr = arr[int(index)]
        if arr.ndim != 3:
            raise ValidationError(f"{ref}: expected a C×H×W tensor, got shape {arr.shape}")
        maps.append(arr)
    if len(maps) == 1 and scale_channels:
        if sum(scale_channels) != maps[0].shape[0]:
            raise ValidationError(f"scale_channels {scale_channels} do not sum to {maps[0].shape[0]}")
        bounds = np.cumsum(scale_channels)[:-1]
        maps = np.split(maps[0], bounds, axis=0)
    return FeatureStack(list(maps))


@dataclass
class Dataset:
    """Everything the trainer needs, fully loaded in memory."""

    labels: LabelTable
    features: np.ndarray          # M×C_total×14×14, scale groups concatenated
    regions: RegionSpec
    subjects: list[str]
    folds: dict[str, int]
    scale_channels: list[int]

    @property
    def num_samples(self) -> int:
        return self.labels.num_samples

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.subjects) if self.folds[s] == fold], dtype=int)

    def subject_indices(self, subjects) -> np.ndarray:
        subjects = set(subjects)
        return np.array([i for i, s in enumerate(self.subjects) if s in subjects], dtype=int)


def load_dataset(manifest: DatasetManifest) -> Dataset:
    from .regional import default_region_spec

    root = manifest.root
    labels = load_labels(root / manifest.labels, manifest.au_ids)
    if manifest.regions:
        regions = RegionSpec.from_json((root / manifest.regions).read_text())
    else:
        regions = default_region_spec()
    regions = regions.for_aus(manifest.au_ids)
    cache = _TensorCache()
    feats, rows, subjects = [], [], []
    scale = manifest.scale_channels
    for s in manifest.samples:
        stack = load_features(s, root, scale, cache)
        if scale is None:
            scale = [m.shape[0] for m in stack.maps]
        feats.append(np.concatenate(stack.maps, axis=0))
        rows.append(int(s["labels_row_index"]))
        subjects.append(str(s["subject"]))
    missing = sorted(set(subjects) - set(manifest.folds))
    if missing:
        raise ValidationError(f"subjects without fold assignment: {missing[:5]}")
    return Dataset(labels.subset(rows), np.stack(feats), regions, subjects,
                   dict(manifest.folds), list(scale))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass
class Template:
    aus: list[int]
    coactivation: float = 0.95
    rate: float = 0.25


@dataclass
class SyntheticConfig:
    au_ids: list[int]
    templates: list[Template]
    exclusions: list[tuple[int, int]] = field(default_factory=list)
    background: float = 0.05
    samples: int = 1000
    subjects: int = 12
    noise: float = 1.0
    signal: float = 1.0
    scale_channels: list[int] = field(default_factory=lambda: [4, 4])
    signal_scale: dict[int, float] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.templates = [t if isinstance(t, Template) else Template(**t) for t in self.templates]
        self.exclusions = [tuple(int(a) for a in p) for p in self.exclusions]
        self.signal_scale = {int(k): float(v) for k, v in self.signal_scale.items()}
        self.validate()

    def validate(self) -> None:
        ids = set(self.au_ids)
        if sorted(ids) != list(self.au_ids) or len(ids) != len(self.au_ids):
            raise ConfigurationError("au_ids must be unique and ascending")
        for p in [self.background] + [t.coactivation for t in self.templates] + \
                 [t.rate for t in self.templates]:
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"probability {p} outside [0, 1]")
        if sum(t.rate for t in self.templates) > 1.0 + 1e-12:
            raise ConfigurationError("template rates sum above 1")
        for t in self.templates:
            if not t.aus or not set(t.aus) <= ids:
                raise ConfigurationError(f"template {t.aus} references unknown AUs")
        for a, b in self.exclusions:
            if a not in ids or b not in ids or a == b:
                raise ConfigurationError(f"bad exclusion pair ({a}, {b})")
            for t in self.templates:
                if a in t.aus and b in t.aus:
                    raise ConfigurationError(
                        f"AU{a} and AU{b} are both in template {t.aus} and in an exclusion pair")
        if self.samples < 1 or self.subjects < 1 or self.subjects > self.samples:
            raise ConfigurationError("need 1 <= subjects <= samples")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")
        if sum(self.scale_channels) < 1:
            raise ConfigurationError("need at least one feature channel")

    @classmethod
    def from_obj(cls, obj: dict) -> "SyntheticConfig":
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_obj(self) -> dict:
        obj = asdict(self)
        obj["exclusions"] = [list(p) for p in self.exclusions]
        obj["signal_scale"] = {str(k): v for k, v in self.signal_scale.items()}
        return obj


@dataclass
class SyntheticDataset:
    labels: LabelTable
    features: np.ndarray   # M×C_total×14×14
    regions: RegionSpec
    scale_channels: list[int]

    def stacks(self) -> list[FeatureStack]:
        bounds = np.cumsum(self.scale_channels)[:-1]
        return [FeatureStack(list(np.split(f, bounds, axis=0))) for f in self.features]


def synthetic_regions(au_ids: Sequence[int]) -> RegionSpec:
    """Spread AU landmarks over the face grid, left side mirrored on the right."""
    c = len(au_ids)
    rows = [3 + (10 * k) // max(c - 1, 1) for k in range(c)]
    entries = []
    for k, au in enumerate(au_ids):
        y = rows[k] * 16 + 8
        x_left = (3 + (k % 2)) * 16 + 8
        entries.append(RegionEntry(int(au), (float(x_left), float(y)),
                                   (float(INPUT_SIZE - 1 - x_left), float(y))))
    return RegionSpec(entries, note="synthetic layout")


def _sample_labels(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    idx = {a: k for k, a in enumerate(cfg.au_ids)}
    m, c = cfg.samples, len(cfg.au_ids)
    y = np.zeros((m, c), dtype=np.int8)
    cum = np.cumsum([t.rate for t in cfg.templates])
    pick = np.searchsorted(cum, rng.random(m), side="right")
    member_draw = rng.random((m, c))
    for t_index, t in enumerate(cfg.templates):
        rows = pick == t_index
        y[rows, idx[t.aus[0]]] = 1
        for au in t.aus[1:]:
            k = idx[au]
            y[rows & (member_draw[:, k] < t.coactivation), k] = 1
    y |= (rng.random((m, c)) < cfg.background).astype(np.int8)
    for a, b in cfg.exclusions:
        both = (y[:, idx[a]] == 1) & (y[:, idx[b]] == 1)
        y[both, idx[b]] = 0
    return y


def generate_synthetic(cfg: SyntheticConfig) -> SyntheticDataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    y = _sample_labels(cfg, rng)
    m, c = y.shape
    regions = synthetic_regions(cfg.au_ids)
    channels = sum(cfg.scale_channels)
    feats = rng.standard_normal((m, channels, GRID, GRID)) * cfg.noise
    centers = regions.grid_centers()
    for k, au in enumerate(cfg.au_ids):
        ch = k % channels
        strength = cfg.signal * cfg.signal_scale.get(int(au), 1.0)
        on = y[:, k] == 1
        for side in (2 * k, 2 * k + 1):
            r0, c0 = crop_origin(centers[side], CROP, GRID)
            feats[on, ch, r0:r0 + CROP, c0:c0 + CROP] += strength
    per_subject = -(-m // cfg.subjects)
    subjects = [f"S{i // per_subject:03d}" for i in range(m)]
    frames = [str(i % per_subject) for i in range(m)]
    labels = LabelTable(list(cfg.au_ids), y, subjects, frames)
    return SyntheticDataset(labels, feats, regions, list(cfg.scale_channels))


def population_edge_stats(cfg: SyntheticConfig) -> EdgeStats:
    """Exact label statistics of the generative process, by full enumeration."""
    idx = {a: k for k, a in enumerate(cfg.au_ids)}
    c = len(cfg.au_ids)
    dist: dict[tuple, float] = {}

    def add(state, p):
        if p > 0:
            dist[state] = dist.get(state, 0.0) + p

    add(tuple([0] * c), 1.0 - sum(t.rate for t in cfg.templates))
    for t in cfg.templates:
        members = [idx[a] for a in t.aus[1:]]
        for mask in range(2 ** len(members)):
            state = [0] * c
            state[idx[t.aus[0]]] = 1
            p = t.rate
            for bit, k in enumerate(members):
                on = (mask >> bit) & 1
                state[k] = max(state[k], on)
                p *= t.coactivation if on else 1.0 - t.coactivation
            add(tuple(state), p)
    for k in range(c):
        nxt: dict[tuple, float] = {}
        for state, p in dist.items():
            for on, q in ((1, cfg.background), (0, 1.0 - cfg.background)):
                s = list(state)
                s[k] = max(s[k], on)
                nxt[tuple(s)] = nxt.get(tuple(s), 0.0) + p * q
        dist = nxt
    final: dict[tuple, float] = {}
    for state, p in dist.items():
        s = list(state)
        for a, b in cfg.exclusions:
            if s[idx[a]] and s[idx[b]]:
                s[idx[b]] = 0
        final[tuple(s)] = final.get(tuple(s), 0.0) + p
    states = np.array(list(final.keys()), dtype=float)
    probs = np.array(list(final.values()))
    marginal = probs @ states
    joint = (states * probs[:, None]).T @ states
    defined = np.broadcast_to(marginal[None, :] > 0, (c, c)).copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        conditional = np.where(defined, joint / np.where(marginal > 0, marginal, 1)[None, :], np.nan)
    return EdgeStats(marginal=marginal, conditional=conditional, defined=defined,
                     cooccurrence_counts=joint, num_samples=0)


def write_synthetic(ds: SyntheticDataset, out_dir, name: str = "synthetic", k: int = 3,
                    fold_seed: int = 0) -> DatasetManifest:
    """Write labels.csv, regions.json, features.rgt and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labels(out / "labels.csv", ds.labels)
    (out / "regions.json").write_text(ds.regions.to_json())
    nm.save_tensor(out / "features.rgt", ds.features)
    samples = [{"id": f"{s}_{f}", "subject": s, "labels_row_index": i, "features": f"features.rgt#{i}"}
               for i, (s, f) in enumerate(zip(ds.labels.subjects, ds.labels.frames))]
    manifest = DatasetManifest(name, list(ds.labels.au_ids), {}, samples,
                               scale_channels=list(ds.scale_channels), root=out)
    manifest = manifest.with_folds(k, fold_seed)
    manifest.save(out / "manifest.json")
    return manifest


def dataset_from_synthetic(ds: SyntheticDataset, k: int = 3, fold_seed: int = 0) -> Dataset:
    subjects = list(ds.labels.subjects)
    return Dataset(ds.labels, ds.features, ds.regions, subjects,
                   make_folds(subjects, k, fold_seed), list(ds.scale_channels))

