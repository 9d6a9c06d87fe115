"""Manifests, split loading, batching and the synthetic two-class corpus."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from . import features
from .errors import DataError
from .numerics import RngStreams

LABELS = {"negative": 0, "positive": 1}
LABEL_NAMES = {v: k for k, v in LABELS.items()}
SPLITS = ("train", "devel", "test")
HEADER = ["filename", "label", "split"]


@dataclass(frozen=True)
class Entry:
    path: Path
    label: int
    split: str


@dataclass
class Manifest:
    entries: List[Entry]
    source: Optional[Path] = None

    def split(self, name: str) -> List[Entry]:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.split == name]

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Parse ``filename,label,split`` CSV; relative paths resolve against the file's directory."""
    path = Path(path)
    root = path.parent
    entries: List[Entry] = []
    seen: Dict[Path, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != HEADER:
            raise DataError(f"{path}:1: expected header {','.join(HEADER)!r}, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            name, label, split = (cell.strip() for cell in row)
            if label not in LABELS:
                raise DataError(f"{path}:{lineno}: unknown label {label!r} (expected negative or positive)")
            if split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r} (expected one of {', '.join(SPLITS)})")
            clip = Path(name)
            clip = (root / clip) if not clip.is_absolute() else clip
            clip = Path(clip.resolve())
            if clip in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {name!r} (first seen on line {seen[clip]})")
            seen[clip] = lineno
            entries.append(Entry(clip, LABELS[label], split))
    return Manifest(entries, path)


def write_manifest(path: Union[str, Path], rows: List[Tuple[str, int, str]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for name, label, split in rows:
            writer.writerow([name, LABEL_NAMES[label], split])


# --------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    """Two archetypes of band-limited noise bursts.

    Class 0 bursts sit at 300-800 Hz and repeat at 3 Hz, class 1 bursts at
    1500-3000 Hz and 7 Hz; each clip lasts 2-10 s over a white-noise floor.
    """

    n_per_class_per_split: int = 10
    seed: int = 0
    sample_rate: int = features.SAMPLE_RATE
    min_seconds: float = 2.0
    max_seconds: float = 10.0
    bands: Tuple[Tuple[float, float], Tuple[float, float]] = ((300.0, 800.0), (1500.0, 3000.0))
    burst_rates: Tuple[float, float] = (3.0, 7.0)
    snr_db: float = 20.0
    snr_jitter_db: float = 6.0


def _band_noise(rng: np.random.Generator, n: int, lo: float, hi: float, sr: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spectrum[(freqs < lo) | (freqs > hi)] = 0
    out = np.fft.irfft(spectrum, n)
    return out / (np.std(out) + 1e-12)


def synth_clip(spec: SynthSpec, label: int, split: str, index: int) -> np.ndarray:
    """One clip as float samples; a pure function of ``(spec, label, split, index)``."""
    rng = RngStreams(spec.seed).get(f"synth/{split}/{label}/{index}")
    sr = spec.sample_rate
    n = int(round(rng.uniform(spec.min_seconds, spec.max_seconds) * sr))
    lo, hi = spec.bands[label]
    center = rng.uniform(lo, hi)
    half_width = 0.15 * center
    tone = _band_noise(rng, n, max(center - half_width, 20.0), min(center + half_width, sr / 2 - 1), sr)

    rate = spec.burst_rates[label]
    period = sr / rate
    burst = int(0.4 * period)
    envelope = np.zeros(n)
    start = rng.uniform(0, period)
    window = np.hanning(burst)
    while start < n:
        s = int(start)
        e = min(n, s + burst)
        envelope[s:e] = window[: e - s]
        start += period
    signal = tone * envelope

    snr = spec.snr_db + rng.uniform(-spec.snr_jitter_db, spec.snr_jitter_db)
    sig_power = np.mean(signal ** 2) + 1e-12
    noise = rng.standard_normal(n) * np.sqrt(sig_power / 10 ** (snr / 10))
    clip = signal + noise
    gain = rng.uniform(0.3, 0.9)
    return clip * (gain / (np.max(np.abs(clip)) + 1e-12))


def generate_synth(spec: SynthSpec, out_dir: Union[str, Path]) -> Manifest:
    """Write ``<split>/<label>_<i>.wav`` files plus ``manifest.csv`` and return the manifest."""
    out_dir = Path(out_dir)
    rows = []
    for split in SPLITS:
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        for label in (0, 1):
            for i in range(spec.n_per_class_per_split):
                rel = f"{split}/{LABEL_NAMES[label]}_{i:04d}.wav"
                features.write_wav(out_dir / rel, synth_clip(spec, label, split, i), spec.sample_rate)
                rows.append((rel, label, split))
    write_manifest(out_dir / "manifest.csv", rows)
    return load_manifest(out_dir / "manifest.csv")


# --------------------------------------------------------------------------
# feature loading and batching


@dataclass
class SplitData:
    x: np.ndarray
    y: np.ndarray
    paths: List[Path] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.y)


Extractor = Callable[[Path], np.ndarray]


def extract_all(paths: List[Path], extractor: Extractor = features.extract_file, threads: int = 1) -> np.ndarray:
    """Features for every path, in input order regardless of worker scheduling."""
    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            feats = list(pool.map(extractor, paths))
    else:
        feats = [extractor(p) for p in paths]
    return np.stack(feats) if feats else np.zeros((0, 3, features.N_MELS, features.N_FRAMES), np.float32)


def load_split(
    manifest: Manifest,
    split: str,
    *,
    threads: int = 1,
    cache_dir: Optional[Union[str, Path]] = None,
) -> SplitData:
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    paths = [e.path for e in entries]

    def extractor(p: Path) -> np.ndarray:
        return features.extract_file(p, cache_dir)

    x = extract_all(paths, extractor, threads)
    y = np.array([e.label for e in entries], dtype=np.int64)
    return SplitData(x, y, paths, split)


def batches(
    data: SplitData,
    batch_size: int,
    seed: int = 0,
    epoch: int = 0,
    shuffle: Optional[bool] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(features, labels)`` batches; the final partial batch is kept.

    Training splits are shuffled with a stream derived from ``(seed, epoch)``;
    other splits keep manifest order.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle is None:
        shuffle = data.split == "train"
    order = np.arange(len(data))
    if shuffle:
        order = RngStreams(seed).get(f"shuffle/epoch{epoch}").permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.x[idx], data.y[idx]
