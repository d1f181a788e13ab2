"""Flow dataset on-disk format, loading, chronological splitting and synthesis.

Layout of a dataset directory::

    manifest.json
    <split>_coarse.f32    little-endian float32, [count, h, w]
    <split>_fine.f32      little-endian float32, [count, h*N, w*N]
    <split>_factors.bin   fixed-width little-endian records (FACTOR_DTYPE)

``<split>`` is ``train``/``val``/``test``, or a single ``all`` split that is
divided 7:1:2 in temporal order at load time.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .context import NUM_DAYS, NUM_HOURS, NUM_WEATHER, TEMP_RANGE, WIND_RANGE, ExternalFactors
from .errors import DatasetLoadError, RejectedInputError
from .flow import FlowMap, GridRelation, aggregate

log = logging.getLogger(__name__)

FORMAT_NAME = "plgf-flow-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
CONSERVATION_TOL = 1e-3
INTERVAL_MINUTES = 30
SLOTS_PER_DAY = 24 * 60 // INTERVAL_MINUTES

FACTOR_DTYPE = np.dtype(
    {
        "names": ["timestamp", "weather_class", "temperature_c", "wind_mph",
                  "day_of_week", "hour_of_day", "is_holiday", "is_weekend"],
        "formats": ["<i8", "<i4", "<f4", "<f4", "<i4", "<i4", "u1", "u1"],
        "offsets": [0, 8, 12, 16, 20, 24, 28, 29],
        "itemsize": 32,
    }
)

CARDINALITIES = {
    "weather_class": NUM_WEATHER,
    "day_of_week": NUM_DAYS,
    "hour_of_day": NUM_HOURS,
    "is_holiday": 2,
    "is_weekend": 2,
}


@dataclass(frozen=True)
class Sample:
    coarse: FlowMap
    fine: FlowMap
    factors: ExternalFactors
    timestamp: int


@dataclass
class DatasetManifest:
    counts: dict
    coarse_shape: tuple
    fine_shape: tuple
    upscale_factor: int
    source: str = "synthetic"
    seed: int | None = None
    cardinalities: dict = field(default_factory=lambda: dict(CARDINALITIES))
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def relation(self) -> GridRelation:
        return GridRelation(self.upscale_factor, self.coarse_shape)


def split_sizes(n: int) -> tuple[int, int, int]:
    """7:1:2 split; train and val rounded down, remainder to test."""
    train = math.floor(0.7 * n)
    val = math.floor(0.1 * n)
    return train, val, n - train - val


class SplitData:
    """One split held as arrays; iterating yields :class:`Sample` in temporal order."""

    def __init__(self, name: str, coarse: np.ndarray, fine: np.ndarray, records: np.ndarray):
        self.name = name
        self.coarse = coarse
        self.fine = fine
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @property
    def timestamps(self) -> np.ndarray:
        return self.records["timestamp"].astype(np.int64)

    def factors(self, i: int) -> ExternalFactors:
        r = self.records[i]
        return ExternalFactors(
            weather_class=int(r["weather_class"]),
            temperature_c=float(r["temperature_c"]),
            wind_mph=float(r["wind_mph"]),
            day_of_week=int(r["day_of_week"]),
            hour_of_day=int(r["hour_of_day"]),
            is_holiday=bool(r["is_holiday"]),
            is_weekend=bool(r["is_weekend"]),
        )

    def __getitem__(self, i: int) -> Sample:
        return Sample(FlowMap(self.coarse[i]), FlowMap(self.fine[i]), self.factors(i), int(self.records[i]["timestamp"]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "SplitData":
        return SplitData(self.name, self.coarse[idx], self.fine[idx], self.records[idx])

    def tensors(self, dtype=torch.float32):
        """``(coarse[B,1,h,w], fine[B,1,H,W], categorical[B,3], continuous[B,4])``."""
        r = self.records
        cat = np.stack([r["day_of_week"], r["hour_of_day"], r["weather_class"]], axis=1).astype(np.int64)
        cont = np.stack(
            [r["temperature_c"], r["wind_mph"], r["is_holiday"], r["is_weekend"]], axis=1
        ).astype(np.float64)
        return (
            torch.as_tensor(np.ascontiguousarray(self.coarse[:, None]), dtype=dtype),
            torch.as_tensor(np.ascontiguousarray(self.fine[:, None]), dtype=dtype),
            torch.as_tensor(cat),
            torch.as_tensor(cont, dtype=dtype),
        )


# ---------------------------------------------------------------- writing

def factor_records(factors: Sequence[ExternalFactors], timestamps: Sequence[int]) -> np.ndarray:
    rec = np.zeros(len(factors), dtype=FACTOR_DTYPE)
    for i, (f, t) in enumerate(zip(factors, timestamps)):
        rec[i] = (t, f.weather_class, f.temperature_c, f.wind_mph, f.day_of_week,
                  f.hour_of_day, int(f.is_holiday), int(f.is_weekend))
    return rec


def _write_blob(path: Path, arr: np.ndarray) -> dict:
    data = arr.tobytes()
    path.write_bytes(data)
    return {"file": path.name, "offset": 0, "nbytes": len(data)}


def write_dataset(
    out_dir,
    coarse: np.ndarray,
    fine: np.ndarray,
    records: np.ndarray,
    *,
    source: str = "synthetic",
    seed: int | None = None,
    presplit: bool = True,
    extra: dict | None = None,
) -> Path:
    """Write arrays ``coarse[n,h,w]``, ``fine[n,H,W]`` and factor records in the dataset layout.

    Records must be in temporal order.  With ``presplit`` the data is written as
    train/val/test files, otherwise as a single ``all`` split.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coarse = np.ascontiguousarray(coarse, dtype="<f4")
    fine = np.ascontiguousarray(fine, dtype="<f4")
    n = len(records)
    clean = np.zeros(n, dtype=FACTOR_DTYPE)  # zeroed padding keeps files byte-deterministic
    for name in FACTOR_DTYPE.names:
        clean[name] = records[name]
    records = clean
    if coarse.shape[0] != n or fine.shape[0] != n:
        raise RejectedInputError("coarse, fine and factor records must have the same length")
    relation = GridRelation.from_shapes(coarse.shape[1:], fine.shape[1:])
    if presplit:
        a, b, _ = split_sizes(n)
        bounds = {"train": slice(0, a), "val": slice(a, a + b), "test": slice(a + b, n)}
    else:
        bounds = {"all": slice(0, n)}
    splits = {}
    for name, sl in bounds.items():
        splits[name] = {
            "count": sl.stop - sl.start,
            "coarse": _write_blob(out / f"{name}_coarse.f32", coarse[sl]),
            "fine": _write_blob(out / f"{name}_fine.f32", fine[sl]),
            "factors": _write_blob(out / f"{name}_factors.bin", records[sl]),
        }
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "source": source,
        "seed": seed,
        "upscale_factor": relation.upscale_factor,
        "channels": 1,
        "coarse_shape": list(relation.coarse_shape),
        "fine_shape": list(relation.fine_shape),
        "dtype": "<f4",
        "interval_minutes": INTERVAL_MINUTES,
        "cardinalities": CARDINALITIES,
        "factor_record": {
            "itemsize": FACTOR_DTYPE.itemsize,
            "fields": [
                {"name": name, "dtype": FACTOR_DTYPE.fields[name][0].str, "offset": FACTOR_DTYPE.fields[name][1]}
                for name in FACTOR_DTYPE.names
            ],
        },
        "splits": splits,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def convert_arrays(out_dir, coarse, fine, factors: Sequence[ExternalFactors], timestamps=None,
                   channel: int = 0, source: str = "taxibj", presplit: bool = True) -> Path:
    """One-time converter for archives already decoded into numpy arrays.

    ``coarse``/``fine`` may carry a channel axis (``[n, c, h, w]``, e.g. inflow and
    outflow); ``channel`` selects which one is kept.
    """
    coarse = np.asarray(coarse)
    fine = np.asarray(fine)
    if coarse.ndim == 4:
        coarse = coarse[:, channel]
    if fine.ndim == 4:
        fine = fine[:, channel]
    if timestamps is None:
        timestamps = np.arange(len(factors))
    return write_dataset(out_dir, coarse, fine, factor_records(factors, timestamps), source=source,
                         presplit=presplit, extra={"channel_selected": channel})


# ---------------------------------------------------------------- loading

def _read_blob(root: Path, entry: dict, dtype, shape) -> np.ndarray:
    path = root / entry["file"]
    if not path.is_file():
        raise DatasetLoadError(f"missing data file {path}")
    raw = path.read_bytes()
    off, nbytes = int(entry.get("offset", 0)), int(entry["nbytes"])
    if off + nbytes > len(raw):
        raise DatasetLoadError(f"{path} is truncated: need {off + nbytes} bytes, have {len(raw)}")
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if nbytes != expected:
        raise DatasetLoadError(f"{path}: {nbytes} bytes does not match shape {shape}")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()


def _validate_split(split: SplitData, relation: GridRelation) -> None:
    agg = aggregate(split.fine.astype(np.float64), relation)
    c = split.coarse.astype(np.float64)
    rel = np.abs(agg - c) / (np.abs(c) + 1.0)
    bad = np.nonzero(rel.reshape(len(split), -1).max(axis=1) > CONSERVATION_TOL)[0]
    if len(bad):
        raise DatasetLoadError(
            f"{len(bad)} sample(s) in split {split.name!r} violate conservation beyond {CONSERVATION_TOL}",
            indices=bad.tolist(),
        )
    if np.any(split.coarse < 0) or np.any(split.fine < 0) or not np.all(np.isfinite(split.fine)):
        raise DatasetLoadError(f"split {split.name!r} contains negative or non-finite flows")
    r = split.records
    for name, card in CARDINALITIES.items():
        col = r[name].astype(np.int64)
        bad = np.nonzero((col < 0) | (col >= card))[0]
        if len(bad):
            raise DatasetLoadError(f"{name} outside [0, {card}) in split {split.name!r}", indices=bad.tolist())
    if np.any(np.diff(split.timestamps) <= 0):
        raise DatasetLoadError(f"split {split.name!r} is not in strictly increasing temporal order")


def load_dataset(path, relation: GridRelation | None = None):
    """Load a dataset directory.

    Returns ``(manifest, {"train": SplitData, "val": ..., "test": ...})``.
    Raises :class:`DatasetLoadError` for a malformed manifest, missing files,
    shape mismatches, broken temporal order or conservation violations.
    """
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetLoadError(f"no manifest.json in {root}")
    try:
        m = json.loads(mpath.read_text())
        if m.get("format") != FORMAT_NAME:
            raise DatasetLoadError(f"unrecognised format {m.get('format')!r}")
        if int(m.get("version", 0)) > FORMAT_VERSION:
            raise DatasetLoadError(f"manifest version {m['version']} is newer than supported {FORMAT_VERSION}")
        coarse_shape = tuple(m["coarse_shape"])
        fine_shape = tuple(m["fine_shape"])
        n = int(m["upscale_factor"])
        split_meta = m["splits"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetLoadError(f"malformed manifest: {exc}") from exc
    try:
        rel = GridRelation(n, coarse_shape)
    except Exception as exc:
        raise DatasetLoadError(f"invalid grid geometry in manifest: {exc}") from exc
    if rel.fine_shape != fine_shape:
        raise DatasetLoadError(f"fine_shape {fine_shape} inconsistent with coarse {coarse_shape} x{n}")
    if relation is not None and relation != rel:
        raise DatasetLoadError(f"dataset geometry {rel} does not match requested {relation}")
    if m.get("factor_record", {}).get("itemsize", FACTOR_DTYPE.itemsize) != FACTOR_DTYPE.itemsize:
        raise DatasetLoadError("factor record width does not match this reader")

    loaded = {}
    for name, meta in split_meta.items():
        cnt = int(meta["count"])
        loaded[name] = SplitData(
            name,
            _read_blob(root, meta["coarse"], "<f4", (cnt, *coarse_shape)).astype(np.float32),
            _read_blob(root, meta["fine"], "<f4", (cnt, *fine_shape)).astype(np.float32),
            _read_blob(root, meta["factors"], FACTOR_DTYPE, (cnt,)),
        )

    if set(loaded) == {"all"}:
        whole = loaded["all"]
        _validate_split(whole, rel)
        a, b, _ = split_sizes(len(whole))
        splits = {
            "train": whole.subset(slice(0, a)),
            "val": whole.subset(slice(a, a + b)),
            "test": whole.subset(slice(a + b, None)),
        }
        for k, v in splits.items():
            v.name = k
    elif set(loaded) == set(SPLITS):
        splits = loaded
        for s in splits.values():
            _validate_split(s, rel)
        total = sum(len(s) for s in splits.values())
        if tuple(len(splits[k]) for k in SPLITS) != split_sizes(total):
            raise DatasetLoadError(
                f"split sizes {[len(splits[k]) for k in SPLITS]} do not follow the 7:1:2 rule for {total} samples"
            )
    else:
        raise DatasetLoadError(f"manifest splits must be train/val/test or all, got {sorted(loaded)}")
    if sum(len(s) for s in splits.values()) == 0:
        raise DatasetLoadError("dataset is empty")

    nonempty = [splits[k] for k in SPLITS if len(splits[k])]
    for prev, nxt in zip(nonempty, nonempty[1:]):
        if prev.timestamps.max() >= nxt.timestamps.min():
            raise DatasetLoadError(f"split {prev.name!r} overlaps {nxt.name!r} in time")

    manifest = DatasetManifest(
        counts={k: len(splits[k]) for k in SPLITS},
        coarse_shape=coarse_shape,
        fine_shape=fine_shape,
        upscale_factor=n,
        source=m.get("source", "unknown"),
        seed=m.get("seed"),
        cardinalities=m.get("cardinalities", dict(CARDINALITIES)),
        raw=m,
    )
    return manifest, splits


# ---------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SkewParams:
    """Shape of the synthetic long-tailed flow field.

    A fixed set of Gaussian hot spots (the "city centre") sits on a lognormal
    background in which a fraction of cells is exactly empty.
    """

    hotspots: int = 5
    peak_range: tuple = (40.0, 160.0)
    width_range: tuple = (0.02, 0.06)  # hot-spot std as a fraction of the fine width
    floor_mu: float = -1.2
    floor_sigma: float = 1.0
    zero_fraction: float = 0.15
    jitter: float = 0.25


# Fixed-date holidays (month, day) used by the synthetic calendar.
HOLIDAYS = {(1, 1), (5, 1), (5, 2), (5, 3), (10, 1), (10, 2), (10, 3), (10, 4), (10, 5), (10, 6), (10, 7)}
SYNTH_START = dt.datetime(2013, 7, 1)


def _daily_profile(hour: np.ndarray, weekend: np.ndarray) -> np.ndarray:
    morning = np.exp(-((hour - 8.5) ** 2) / 4.0)
    evening = np.exp(-((hour - 18.0) ** 2) / 6.0)
    night = 0.25 + 0.15 * np.cos((hour - 14.0) / 24.0 * 2 * np.pi)
    workday = night + 0.9 * morning + 0.8 * evening
    weekend_curve = night + 0.5 * np.exp(-((hour - 14.0) ** 2) / 18.0)
    return np.where(weekend, weekend_curve, workday)


def synthesize(seed: int, count: int, relation: GridRelation, skew: SkewParams = SkewParams()):
    """Generate ``(coarse, fine, records)`` arrays deterministically from ``seed``."""
    if count < 1:
        raise RejectedInputError("count must be >= 1")
    rng = np.random.default_rng(seed)
    H, W = relation.fine_shape
    t = np.arange(count, dtype=np.int64)
    when = [SYNTH_START + dt.timedelta(minutes=INTERVAL_MINUTES * int(k)) for k in t]
    dow = np.array([d.weekday() for d in when])
    hour = np.array([d.hour for d in when])
    holiday = np.array([(d.month, d.day) in HOLIDAYS for d in when])
    weekend = dow >= 5
    doy = np.array([d.timetuple().tm_yday for d in when], dtype=np.float64)

    # weather: sticky Markov chain over 16 classes
    weather = np.empty(count, dtype=np.int64)
    weather[0] = rng.integers(NUM_WEATHER)
    for k in range(1, count):
        weather[k] = weather[k - 1] if rng.random() < 0.9 else rng.integers(NUM_WEATHER)
    temp = 12 + 14 * np.sin((doy - 110) / 365 * 2 * np.pi) + 4 * np.sin((hour - 9) / 24 * 2 * np.pi)
    temp = np.clip(temp + rng.normal(0, 2, count), *TEMP_RANGE)
    wind = np.clip(rng.gamma(2.0, 3.0, count), *WIND_RANGE)

    # fixed city layout
    cy = rng.uniform(0.1, 0.9, skew.hotspots) * H
    cx = rng.uniform(0.1, 0.9, skew.hotspots) * W
    peak = rng.uniform(*skew.peak_range, skew.hotspots)
    width = np.maximum(rng.uniform(*skew.width_range, skew.hotspots) * W, 0.75)
    base = rng.lognormal(skew.floor_mu, skew.floor_sigma, (H, W))
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    bumps = np.stack([np.exp(-((yy - cy[k]) ** 2 + (xx - cx[k]) ** 2) / (2 * width[k] ** 2)) for k in range(skew.hotspots)])
    bumps[bumps < 1e-3] = 0.0

    intensity = _daily_profile(hour.astype(np.float64), weekend | holiday)
    intensity = intensity * np.where(weather >= 12, 0.7, 1.0)  # severe weather classes damp travel

    fine = np.empty((count, H, W), dtype=np.float32)
    for k in range(count):
        amp = peak * rng.lognormal(0.0, skew.jitter, skew.hotspots) * intensity[k]
        floor = base * rng.lognormal(0.0, skew.jitter, (H, W)) * intensity[k]
        floor[rng.random((H, W)) < skew.zero_fraction] = 0.0
        fine[k] = (floor + np.tensordot(amp, bumps, axes=1)).astype(np.float32)
    coarse = aggregate(fine.astype(np.float64), relation).astype(np.float32)

    records = np.zeros(count, dtype=FACTOR_DTYPE)
    records["timestamp"] = t
    records["weather_class"] = weather
    records["temperature_c"] = temp
    records["wind_mph"] = wind
    records["day_of_week"] = dow
    records["hour_of_day"] = hour
    records["is_holiday"] = holiday
    records["is_weekend"] = weekend
    return coarse, fine, records


def generate_synthetic(out_dir, seed: int, count: int, relation: GridRelation,
                       skew: SkewParams = SkewParams(), presplit: bool = True) -> Path:
    """Write a deterministic synthetic long-tail dataset to ``out_dir``."""
    coarse, fine, records = synthesize(seed, count, relation, skew)
    log.info("synthesized %d samples %s -> %s", count, relation.coarse_shape, relation.fine_shape)
    return write_dataset(out_dir, coarse, fine, records, source="synthetic", seed=seed, presplit=presplit,
                         extra={"skew": {k: list(v) if isinstance(v, tuple) else v
                                         for k, v in skew.__dict__.items()}})
