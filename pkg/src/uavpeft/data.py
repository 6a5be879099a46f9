"""Manifests, stratified splits, k-fold plans, training-set inflation and a
synthetic rotor-audio generator for desk-scale runs."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import AugmentationPlan, AugmentationSpec, augment_once
from .dsp import FeatureConfig, Waveform, ingest_wav, log_mel, read_feature_cache, write_feature_cache, write_wav

__all__ = [
    "DataError",
    "ManifestEntry",
    "Split",
    "SplitAssignment",
    "KFoldPlan",
    "TrainingItem",
    "SynthConfig",
    "parse_manifest",
    "class_names",
    "stratified_split",
    "kfold_plan",
    "inflate",
    "check_no_leakage",
    "featurize",
    "synth_clip",
    "synth_generate",
]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    clip_id: int
    meta: tuple[tuple[str, str], ...] = ()


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    VALIDATION = "validation"
    INFERENCE = "inference"

    @property
    def augmentable(self) -> bool:
        return self in (Split.TRAIN, Split.TEST)


# ---------------------------------------------------------------------------
# manifest


def parse_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a ``path,label[,clip_id][,extra...]`` CSV; paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise DataError(f"{path}: no entries (empty file)")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["path", "label"]:
        raise DataError(f"{path}:1: header must start with 'path,label', got {','.join(header)!r}")
    has_id = "clip_id" in header
    entries, seen_paths, seen_ids = [], set(), set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, found {len(row)}")
        record = dict(zip(header, (cell.strip() for cell in row)))
        if not record["path"]:
            raise DataError(f"{path}:{lineno}: empty path")
        if not record["label"]:
            raise DataError(f"{path}:{lineno}: empty label")
        if record["path"] in seen_paths:
            raise DataError(f"{path}:{lineno}: duplicate path {record['path']!r}")
        seen_paths.add(record["path"])
        if has_id:
            try:
                clip_id = int(record["clip_id"])
            except ValueError:
                raise DataError(f"{path}:{lineno}: clip_id {record['clip_id']!r} is not an integer") from None
        else:
            clip_id = lineno - 2
        if clip_id in seen_ids:
            raise DataError(f"{path}:{lineno}: duplicate clip_id {clip_id}")
        seen_ids.add(clip_id)
        meta = tuple((k, v) for k, v in record.items() if k not in ("path", "label", "clip_id"))
        entries.append(ManifestEntry(path.parent / record["path"], record["label"], clip_id, meta))
    if not entries:
        raise DataError(f"{path}: no entries")
    return entries


def class_names(entries: Iterable[ManifestEntry]) -> list[str]:
    return sorted({e.label for e in entries})


def _by_class(entries: Sequence[ManifestEntry]) -> dict[str, list[ManifestEntry]]:
    groups: dict[str, list[ManifestEntry]] = defaultdict(list)
    for e in sorted(entries, key=lambda e: e.clip_id):
        groups[e.label].append(e)
    return {label: groups[label] for label in sorted(groups)}


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    exact = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitAssignment:
    splits: dict[int, Split]

    def ids(self, split: Split) -> list[int]:
        return sorted(cid for cid, s in self.splits.items() if s is split)

    def counts(self) -> dict[Split, int]:
        return {s: len(self.ids(s)) for s in Split}

    def report(self) -> str:
        lines = ["clip_id,split"]
        lines += [f"{cid},{self.splits[cid].value}" for cid in sorted(self.splits)]
        return "\n".join(lines) + "\n"


SPLIT_ORDER = (Split.TRAIN, Split.TEST, Split.VALIDATION, Split.INFERENCE)


def stratified_split(
    entries: Sequence[ManifestEntry], ratios: Sequence[float] = (0.6, 0.2, 0.1, 0.1), seed: int = 0
) -> SplitAssignment:
    """Per-class train/test/validation/inference partition (largest-remainder rounding)."""
    if len(ratios) != 4 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be four values summing to 1, got {list(ratios)}")
    assignment: dict[int, Split] = {}
    for ci, (label, group) in enumerate(_by_class(entries).items()):
        if len(group) < 10:
            raise DataError(f"class {label!r} has {len(group)} entries; at least 10 are needed to split")
        perm = np.random.default_rng([seed, ci]).permutation(len(group))
        counts = _largest_remainder(len(group), ratios)
        pos = 0
        for split, count in zip(SPLIT_ORDER, counts):
            for j in perm[pos : pos + count]:
                assignment[group[j].clip_id] = split
            pos += count
    return SplitAssignment(assignment)


@dataclass
class KFoldPlan:
    inference: frozenset[int]
    folds: list[frozenset[int]]

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def pool(self) -> frozenset[int]:
        return frozenset().union(*self.folds)

    def validation(self, i: int) -> frozenset[int]:
        return self.folds[i]

    def train(self, i: int) -> frozenset[int]:
        return self.pool - self.folds[i]

    def report(self) -> str:
        lines = ["clip_id,assignment"]
        owner = {cid: "inference" for cid in self.inference}
        for i, fold in enumerate(self.folds):
            owner.update({cid: f"fold{i}" for cid in fold})
        lines += [f"{cid},{owner[cid]}" for cid in sorted(owner)]
        return "\n".join(lines) + "\n"


def kfold_plan(
    entries: Sequence[ManifestEntry], k: int = 5, seed: int = 0, inference_ratio: float = 0.1
) -> KFoldPlan:
    """Fixed stratified inference hold-out plus k stratified folds over the rest."""
    if k < 2:
        raise DataError("k-fold needs k >= 2")
    inference: set[int] = set()
    folds: list[set[int]] = [set() for _ in range(k)]
    offset = 0
    for ci, (label, group) in enumerate(_by_class(entries).items()):
        n_inf = int(round(len(group) * inference_ratio))
        pool_size = len(group) - n_inf
        if pool_size < k or (inference_ratio > 0 and n_inf == 0):
            raise DataError(f"class {label!r} has {len(group)} entries; too few to stratify into {k} folds")
        perm = np.random.default_rng([seed, ci]).permutation(len(group))
        inference.update(group[j].clip_id for j in perm[:n_inf])
        rest = perm[n_inf:]
        base, extra = divmod(pool_size, k)
        # rotate which folds take the remainder so fold totals stay balanced
        sizes = [base + (1 if (f - offset) % k < extra else 0) for f in range(k)]
        offset = (offset + extra) % k
        pos = 0
        for f, size in enumerate(sizes):
            folds[f].update(group[j].clip_id for j in rest[pos : pos + size])
            pos += size
    return KFoldPlan(frozenset(inference), [frozenset(f) for f in folds])


@dataclass(frozen=True)
class TrainingItem:
    entry: ManifestEntry
    aug_index: int | None = None  # None marks the original clip

    @property
    def source(self) -> int:
        return self.entry.clip_id


def inflate(entries: Sequence[ManifestEntry], plan: AugmentationPlan, split: Split = Split.TRAIN) -> list[TrainingItem]:
    """Originals plus ``plan.k`` augmented copies of each; clean splits are refused."""
    if not split.augmentable:
        raise DataError(f"refusing to augment the {split.value} split; it must stay clean")
    items = []
    for e in entries:
        items.append(TrainingItem(e))
        items.extend(TrainingItem(e, i) for i in range(plan.k))
    return items


def check_no_leakage(train_items: Iterable[TrainingItem], *held_out: Iterable[int]) -> None:
    sources = {item.source for item in train_items}
    for ids in held_out:
        overlap = sources & set(ids)
        if overlap:
            raise DataError(f"leakage: clip ids {sorted(overlap)[:5]} appear in training and a held-out split")


# ---------------------------------------------------------------------------
# featurization


def _cache_key(cfg: FeatureConfig, spec: AugmentationSpec, plan: AugmentationPlan) -> str:
    blob = json.dumps([asdict(cfg), asdict(spec), plan.global_seed], sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def featurize(
    items: Sequence[TrainingItem | ManifestEntry],
    cfg: FeatureConfig,
    plan: AugmentationPlan = AugmentationPlan(),
    spec: AugmentationSpec = AugmentationSpec(),
    cache_dir: str | Path | None = None,
) -> np.ndarray:
    """Log-mel features stacked as (N, 1, n_mels, frames), float32.

    With ``cache_dir`` set, each (clip, augmentation) feature is stored once
    as an LFT1 file and reused.
    """
    key = _cache_key(cfg, spec, plan) if cache_dir else ""
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    out = []
    for item in items:
        if isinstance(item, ManifestEntry):
            item = TrainingItem(item)
        cached = None
        if cache_dir:
            tag = "o" if item.aug_index is None else f"a{item.aug_index}"
            cached = Path(cache_dir) / f"{key}_{item.source}_{tag}.lft"
            if cached.exists():
                out.append(read_feature_cache(cached))
                continue
        w = ingest_wav(item.entry.path, cfg.sample_rate)
        if item.aug_index is not None:
            w = augment_once(w, item.source, item.aug_index, plan, spec)
        values = log_mel(w, cfg).values
        if cached is not None:
            write_feature_cache(cached, values)
        out.append(values)
    shapes = {v.shape for v in out}
    if len(shapes) > 1:
        raise DataError(f"clips yield differing feature shapes {sorted(shapes)}; clips must share one duration")
    return np.stack(out)[:, None].astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic rotor audio


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 8
    clips_per_class: int = 80
    duration: float = 2.0
    sample_rate: int = 16000
    f0_base: float = 110.0
    f0_step: float = 55.0
    harmonics: int = 6
    am_depth: float = 0.5
    blade_pass_range: tuple[float, float] = (8.0, 30.0)
    snr_db_range: tuple[float, float] = (5.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        if self.f0_step < 20:
            raise ValueError("class fundamentals must differ by at least 20 Hz")
        if self.f0(self.n_classes - 1) * 1.0 >= self.sample_rate / 2:
            raise ValueError("highest fundamental exceeds Nyquist")

    def f0(self, c: int) -> float:
        return self.f0_base + c * self.f0_step

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def synth_clip(cfg: SynthConfig, c: int, i: int) -> Waveform:
    """Harmonic stack at f0(c), blade-pass amplitude modulation, white noise at a drawn SNR."""
    rng = np.random.default_rng([cfg.seed, c, i])
    t = np.arange(cfg.n_samples) / cfg.sample_rate
    f0 = cfg.f0(c)
    phases = rng.uniform(0, 2 * np.pi, cfg.harmonics)
    tone = np.zeros_like(t)
    for h in range(1, cfg.harmonics + 1):
        if h * f0 < cfg.sample_rate / 2:
            tone += np.sin(2 * np.pi * h * f0 * t + phases[h - 1]) / h
    f_bp = rng.uniform(*cfg.blade_pass_range)
    signal = tone * (1.0 + cfg.am_depth * np.sin(2 * np.pi * f_bp * t + rng.uniform(0, 2 * np.pi)))
    snr = rng.uniform(*cfg.snr_db_range)
    noise_power = np.mean(signal**2) / 10 ** (snr / 10)
    x = signal + rng.normal(0.0, np.sqrt(noise_power), size=t.shape)
    return Waveform(0.9 * x / np.max(np.abs(x)), cfg.sample_rate)


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write one WAV per clip plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["path,label,clip_id,f0_hz"]
    for c in range(cfg.n_classes):
        label = f"uav_{c:02d}"
        (out / label).mkdir(exist_ok=True)
        for i in range(cfg.clips_per_class):
            rel = f"{label}/{label}_{i:03d}.wav"
            write_wav(out / rel, synth_clip(cfg, c, i))
            rows.append(f"{rel},{label},{c * cfg.clips_per_class + i},{cfg.f0(c):g}")
    manifest = out / "manifest.csv"
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest
