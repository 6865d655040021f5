"""Sequence manifests, frame loading and the synthetic micro-expression generator.

A manifest is a JSON Lines file. An optional first line ``{"header": {...}}``
carries the class names and the pixel normalisation; every other line is a
record::

    {"id": ..., "frames_path": ..., "subject": ..., "emotion": ..., "aus": [...], "num_frames": T}

``frames_path`` is resolved against the manifest's directory and points to a
MERT container with a single ``frames`` entry of shape C x T x 112 x 112 and
raw intensities in [0, 255].
"""

from __future__ import annotations

import itertools
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import container
from .model import default_class_names
from .tensor import Tensor

FRAME_SIZE = 112
MIN_FRAMES = 8
NORMALIZATION = "x/127.5-1"
FRAMES_ENTRY = "frames"

# AU id -> (row, col, size): a 4x4 grid of 28-pixel cells, upper-face AUs
# on top, each patch a 24-pixel square inside its cell. Large patches keep
# the planted signal visible after global space-time pooling.
_GRID_ORDER = (2, 1, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 25)
DEFAULT_REGIONS: dict[int, tuple[int, int, int]] = {
    au: (2 + 28 * (k // 4), 2 + 28 * (k % 4), 24) for k, au in enumerate(_GRID_ORDER)
}

# Per-AU grating wave numbers (cycles across the patch along rows, cols).
# Global pooling discards position, so AUs must differ in local texture.
AU_GRATINGS: dict[int, tuple[int, int]] = {
    1: (1, 0), 2: (0, 1), 4: (1, 1), 5: (1, -1), 6: (2, 0), 7: (0, 2), 9: (2, 2),
    10: (2, -2), 12: (3, 0), 14: (0, 3), 15: (3, 3), 17: (3, -3), 20: (1, 2), 25: (2, 1),
}

# Index-aligned with model.DEFAULT_CLASS_NAMES.
DEFAULT_AU_SETS: tuple[tuple[int, ...], ...] = (
    (6, 12),
    (4, 9, 10),
    (1, 2, 5),
    (14, 15, 17),
    (7, 20, 25),
    (1, 4, 15),
    (1, 2, 4, 5, 20),
)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceRecord:
    id: str
    frames_path: str
    subject: str
    emotion: str
    aus: frozenset
    num_frames: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "frames_path": self.frames_path,
            "subject": self.subject,
            "emotion": self.emotion,
            "aus": sorted(self.aus),
            "num_frames": self.num_frames,
        }


@dataclass
class DatasetManifest:
    records: list[SequenceRecord]
    class_names: tuple[str, ...]
    base_dir: Path = field(default_factory=Path)
    normalization: str = NORMALIZATION

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        ids = set()
        for rec in self.records:
            if rec.id in ids:
                raise ManifestError(f"duplicate record id {rec.id!r}")
            ids.add(rec.id)
            if rec.emotion not in self.class_names:
                raise ManifestError(
                    f"record {rec.id!r}: emotion {rec.emotion!r} not in class names {list(self.class_names)}"
                )
            if not rec.aus:
                raise ManifestError(f"record {rec.id!r} has an empty AU set")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subjects(self) -> list[str]:
        return sorted({r.subject for r in self.records})

    def label(self, rec: SequenceRecord) -> int:
        return self.class_names.index(rec.emotion)

    def labels(self) -> list[int]:
        return [self.label(r) for r in self.records]

    def by_id(self) -> dict[str, SequenceRecord]:
        return {r.id: r for r in self.records}

    def subset(self, ids: Iterable[str]) -> "DatasetManifest":
        table = self.by_id()
        try:
            picked = [table[i] for i in ids]
        except KeyError as exc:
            raise ManifestError(f"unknown record id {exc.args[0]!r}") from None
        return DatasetManifest(picked, self.class_names, self.base_dir, self.normalization)

    def header(self) -> dict:
        return {"class_names": list(self.class_names), "normalization": self.normalization}


def _parse_record(obj: dict, lineno: int) -> SequenceRecord:
    try:
        aus = obj["aus"]
        if not isinstance(aus, list) or not all(isinstance(a, int) and a > 0 for a in aus):
            raise ManifestError(f"line {lineno}: 'aus' must be a list of positive integers")
        num_frames = obj["num_frames"]
        if not isinstance(num_frames, int) or num_frames < 1:
            raise ManifestError(f"line {lineno}: 'num_frames' must be a positive integer")
        return SequenceRecord(
            str(obj["id"]), str(obj["frames_path"]), str(obj["subject"]), str(obj["emotion"]),
            frozenset(aus), num_frames,
        )
    except KeyError as exc:
        raise ManifestError(f"line {lineno}: missing field {exc.args[0]!r}") from None


def load_manifest(path, class_names: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Parse and validate a JSON Lines manifest.

    Class names come from ``class_names`` if given, else the header line,
    else the sorted set of emotions that occur.
    """
    path = Path(path)
    header: dict = {}
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}: line {lineno}: expected a JSON object")
            if "header" in obj and not records and not header:
                header = obj["header"]
                continue
            records.append(_parse_record(obj, lineno))
    if class_names is None:
        class_names = header.get("class_names") or sorted({r.emotion for r in records})
    norm = header.get("normalization", NORMALIZATION)
    if norm != NORMALIZATION:
        raise ManifestError(f"unsupported normalization {norm!r}")
    return DatasetManifest(records, tuple(class_names), path.parent, norm)


def write_manifest(path, manifest: DatasetManifest) -> None:
    lines = [json.dumps({"header": manifest.header()})]
    lines += [json.dumps(r.to_json()) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n")


def normalize(raw: np.ndarray) -> np.ndarray:
    return raw / 127.5 - 1.0


def load_sequence(record: SequenceRecord, base_dir=None) -> Tensor:
    path = Path(record.frames_path)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    entries = container.load(path)
    if FRAMES_ENTRY not in entries:
        raise ManifestError(f"{path}: no {FRAMES_ENTRY!r} entry")
    raw = entries[FRAMES_ENTRY]
    if raw.ndim != 4 or raw.shape[2:] != (FRAME_SIZE, FRAME_SIZE):
        raise ManifestError(f"record {record.id!r}: frames have shape {raw.shape}, expected C x T x 112 x 112")
    if raw.shape[1] != record.num_frames:
        raise ManifestError(
            f"record {record.id!r}: stored T={raw.shape[1]} but manifest says num_frames={record.num_frames}"
        )
    return Tensor(normalize(raw))


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_subjects: int = 4
    n_classes: int = 3
    sequences_per_class_per_subject: int = 2
    t: int = 8
    channels: int = 1
    noise_std: float = 4.0
    bump_amplitude: float = 80.0
    baseline: float = 127.5
    subject_offset_std: float = 0.0
    dropout_prob: float = 0.5
    seed: int = 0
    au_map: Optional[Mapping[int, tuple[int, ...]]] = None
    region_map: Optional[Mapping[int, tuple[int, int, int]]] = None

    def __post_init__(self):
        if self.n_subjects < 1 or self.n_classes < 2 or self.sequences_per_class_per_subject < 1:
            raise ValueError("need >= 1 subject, >= 2 classes and >= 1 sequence per class per subject")
        if self.t < MIN_FRAMES:
            raise ValueError(f"t must be >= {MIN_FRAMES}, got {self.t}")
        if self.channels < 1 or self.noise_std < 0 or not 0 <= self.dropout_prob <= 1:
            raise ValueError("invalid channels, noise_std or dropout_prob")
        au_map = self.resolved_au_map()
        if len(au_map) != self.n_classes:
            raise ValueError(f"au_map covers {len(au_map)} classes, expected {self.n_classes}")
        sets = [frozenset(v) for v in au_map.values()]
        if any(not s for s in sets) or len(set(sets)) != len(sets):
            raise ValueError("au_map entries must be non-empty and distinct per class")
        regions = self.resolved_regions()
        for au in set().union(*sets):
            if au not in regions:
                raise ValueError(f"AU {au} has no region")
            r, c, size = regions[au]
            if size < 1 or r < 0 or c < 0 or r + size > FRAME_SIZE or c + size > FRAME_SIZE:
                raise ValueError(f"region of AU {au} lies outside the 112x112 frame")

    def resolved_au_map(self) -> dict[int, tuple[int, ...]]:
        if self.au_map is not None:
            return {int(k): tuple(v) for k, v in self.au_map.items()}
        if self.n_classes > len(DEFAULT_AU_SETS):
            raise ValueError(f"no default AU sets for {self.n_classes} classes; pass au_map")
        return {k: DEFAULT_AU_SETS[k] for k in range(self.n_classes)}

    def resolved_regions(self) -> dict[int, tuple[int, int, int]]:
        return dict(self.region_map) if self.region_map is not None else dict(DEFAULT_REGIONS)

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_classes": self.n_classes,
            "sequences_per_class_per_subject": self.sequences_per_class_per_subject,
            "t": self.t,
            "channels": self.channels,
            "noise_std": self.noise_std,
            "bump_amplitude": self.bump_amplitude,
            "baseline": self.baseline,
            "subject_offset_std": self.subject_offset_std,
            "dropout_prob": self.dropout_prob,
            "seed": self.seed,
            "au_map": {str(k): list(v) for k, v in self.resolved_au_map().items()},
            "region_map": {str(k): list(v) for k, v in self.resolved_regions().items()},
        }


def raised_cosine(t: int, apex: int, half_width: float) -> np.ndarray:
    """Temporal envelope equal to 1 at ``apex`` and 0 beyond ``half_width``."""
    d = np.abs(np.arange(t) - apex) / half_width
    return np.where(d < 1.0, 0.5 * (1.0 + np.cos(np.pi * np.minimum(d, 1.0))), 0.0)


def au_texture(au: int, size: int) -> np.ndarray:
    """``1 + cos`` grating with whole cycles across the patch, so its mean is exactly 1."""
    ky, kx = AU_GRATINGS.get(au, (au % 3 + 1, au % 2))
    y, x = np.mgrid[0:size, 0:size]
    return 1.0 + np.cos(2.0 * np.pi * (ky * y + kx * x) / size)


def synthesize_sequence(
    rng: np.random.Generator, cfg: SyntheticConfig, aus: Sequence[int], level: float
) -> tuple[np.ndarray, int]:
    regions = cfg.resolved_regions()
    t = cfg.t
    frames = np.full((cfg.channels, t, FRAME_SIZE, FRAME_SIZE), level)
    if cfg.noise_std > 0:
        frames += rng.normal(0.0, cfg.noise_std, size=frames.shape)
    apex = int(rng.integers(1, t - 1))
    env = cfg.bump_amplitude * raised_cosine(t, apex, max(2.0, t / 4))
    for au in sorted(aus):
        r, c, size = regions[au]
        frames[:, :, r : r + size, c : c + size] += env[None, :, None, None] * au_texture(au, size)
    return np.clip(frames, 0.0, 255.0), apex


def generate_synthetic(config: SyntheticConfig, out_dir) -> DatasetManifest:
    """Write ``manifest.jsonl`` and ``frames/<id>.mert`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        (out / "frames").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    rng = np.random.default_rng(config.seed)
    au_map = config.resolved_au_map()
    names = default_class_names(config.n_classes)
    records = []
    for s in range(config.n_subjects):
        subject = f"sub{s + 1:02d}"
        level = config.baseline + rng.normal(0.0, config.subject_offset_std) if config.subject_offset_std else config.baseline
        for c in range(config.n_classes):
            for k in range(config.sequences_per_class_per_subject):
                aus = list(au_map[c])
                if len(aus) > 1 and rng.random() < config.dropout_prob:
                    aus.pop(int(rng.integers(len(aus))))
                frames, _ = synthesize_sequence(rng, config, aus, level)
                rid = f"{subject}_{names[c]}_{k + 1:02d}"
                rel = f"frames/{rid}.mert"
                container.save(out / rel, {FRAMES_ENTRY: frames})
                records.append(SequenceRecord(rid, rel, subject, names[c], frozenset(aus), config.t))
    manifest = DatasetManifest(records, names, out)
    write_manifest(out / "manifest.jsonl", manifest)
    (out / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return manifest


# ---------------------------------------------------------------------------
# co-occurrence diagnostics


@dataclass
class CooccurrenceTable:
    n_records: int
    counts: dict[int, int]
    pair_counts: dict[tuple[int, int], int]

    def count(self, au: int) -> int:
        return self.counts.get(au, 0)

    def pair(self, i: int, j: int) -> int:
        if i == j:
            return self.count(i)
        return self.pair_counts.get((min(i, j), max(i, j)), 0)

    def matrix(self, vocab_ids: Sequence[int]) -> np.ndarray:
        return np.array([[self.pair(i, j) for j in vocab_ids] for i in vocab_ids], dtype=np.int64)


@dataclass
class CooccurrenceSummary:
    overall: CooccurrenceTable
    per_class: dict[str, CooccurrenceTable]


def _tabulate(records: Sequence[SequenceRecord]) -> CooccurrenceTable:
    counts: Counter = Counter()
    pairs: Counter = Counter()
    for rec in records:
        aus = sorted(rec.aus)
        counts.update(aus)
        pairs.update(itertools.combinations(aus, 2))
    return CooccurrenceTable(len(records), dict(counts), dict(pairs))


def split_channels_stats(manifest: DatasetManifest) -> CooccurrenceSummary:
    """AU occurrence and pair counts, per class and over the whole manifest."""
    per_class = {
        name: _tabulate([r for r in manifest.records if r.emotion == name]) for name in manifest.class_names
    }
    return CooccurrenceSummary(_tabulate(manifest.records), per_class)
