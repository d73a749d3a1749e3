"""Patch schema, synthetic causal generator, container format, and splits.

The generator stands in for the two real supervision sources: footprint-
masked cover/height labels (LiDAR-analog) and block-masked stems/AGBD
labels (field-plot-analog).  Latent ground truth is kept on every record
so concept predictions can be scored against truth.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

COVER, HEIGHT, STEMS, AGBD = 0, 1, 2, 3
LABEL_NAMES = ("cover", "height", "stems", "agbd")
N_SAR, N_OPT = 3, 10
N_INPUT = N_SAR + N_OPT

MAGIC = b"PGCB"
VERSION = 1


class DatasetFormatError(Exception):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class DegenerateProcessError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


class EmptyValidationError(ValueError):
    pass


@dataclass
class PatchRecord:
    """One training/validation sample.

    inputs: (13, H, W) float32 — 3 SAR-analog + 10 optical-analog channels.
    position: (2,) float32 — lon, lat in degrees.
    labels: (4, H, W) float32 — cover %, height m, stems /ha, agbd Mg/ha.
    masks: (4, H, W) bool — per-label validity.
    latents: (3, H, W) float32 or None — true cover/height/stems.
    """

    inputs: np.ndarray
    position: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    latents: Optional[np.ndarray]
    census_tag: int

    def __eq__(self, other):
        if not isinstance(other, PatchRecord):
            return NotImplemented
        lat_eq = (
            self.latents is None and other.latents is None
        ) or (
            self.latents is not None
            and other.latents is not None
            and np.array_equal(self.latents, other.latents)
        )
        return (
            np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.masks, other.masks)
            and lat_eq
            and self.census_tag == other.census_tag
        )

    @property
    def patch_size(self) -> int:
        return self.inputs.shape[-1]

    def is_plot_like(self) -> bool:
        return bool(self.masks[AGBD].any())

    def is_gedi_like(self) -> bool:
        return bool(self.masks[COVER].any())


@dataclass
class ProcessSpec:
    """Fixed causal structure and mechanism constants of the generator.

    Edges: environment -> cover, cover -> height, environment -> stems,
    (cover, height, stems) -> agbd.
    """

    h_max: float = 18.0
    height_a: float = 1.0
    height_b: float = 0.6
    kappa1: float = 3.5
    kappa2: float = 0.12
    cover_base: float = -0.2
    cover_env: float = 1.6
    cover_field: float = 1.0
    stems_log_mean: float = 4.6
    stems_env: float = 0.9
    noise_height: float = 0.6
    noise_stems: float = 0.35
    noise_agbd_pixel: float = 2.0
    noise_agbd_record: float = 4.0
    sar_scale: tuple = (0.9, 0.55, 0.75)
    sar_rate: tuple = (0.030, 0.018, 0.045)
    sar_speckle: float = 0.10
    opt_veg: tuple = (0.05, 0.08, 0.06, 0.30, 0.40, 0.35, 0.30, 0.25, 0.20, 0.15)
    opt_soil: tuple = (0.20, 0.25, 0.30, 0.35, 0.35, 0.38, 0.40, 0.35, 0.30, 0.28)
    opt_soil_env: float = 0.35
    noise_optical: float = 0.02

    def validate(self):
        if self.h_max <= 0:
            raise DegenerateProcessError("h_max must be positive")
        if min(self.sar_rate) <= 0:
            raise DegenerateProcessError("SAR saturation rates must be positive")
        for name in ("noise_height", "noise_stems", "noise_agbd_pixel",
                     "noise_agbd_record", "sar_speckle", "noise_optical"):
            if getattr(self, name) < 0:
                raise DegenerateProcessError(f"{name} must be non-negative")

    def agbd_mechanism(self, cover, height, stems):
        """Closed-form aggregation: the generator-side stand-in for allometry."""
        return self.kappa1 * (cover / 100.0) * height + self.kappa2 * np.sqrt(stems) * height


@dataclass
class SynthConfig:
    n_gedi_like: int = 400
    n_plot_like: int = 120
    patch_size: int = 16
    footprint_radius_px: int = 2
    footprints_per_patch: int = 6
    plot_block_size_px: int = 6
    lon_range: tuple = (10.0, 40.0)
    lat_range: tuple = (-25.0, 0.0)
    ood_region: tuple = (32.0, 40.0, -25.0, -17.0)  # lon_min, lon_max, lat_min, lat_max
    val_fraction: float = 0.30
    stems_quantiles: tuple = (0.05, 0.95)
    seed: int = 0

    def validate(self):
        if self.n_gedi_like <= 0 or self.n_plot_like <= 0:
            raise ValueError("record counts must be positive")
        if self.footprint_radius_px < 1:
            raise ValueError("footprint_radius_px must be >= 1")
        lo0, hi0 = self.lon_range
        lo1, hi1 = self.lat_range
        a, b, c, d = self.ood_region
        if not (lo0 <= a <= b <= hi0 and lo1 <= c <= d <= hi1):
            raise ValueError("ood_region must lie within the global lon/lat bounds")


@dataclass
class NormStats:
    input_mean: np.ndarray  # (13,)
    input_std: np.ndarray
    position_mean: np.ndarray  # (2,)
    position_std: np.ndarray
    label_mean: np.ndarray  # (4,)
    label_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "position_mean": self.position_mean.tolist(),
            "position_std": self.position_std.tolist(),
            "label_mean": self.label_mean.tolist(),
            "label_std": self.label_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class SplitSpec:
    train: list
    val_id: list
    val_ood: list
    criteria: dict = field(default_factory=dict)

    def validate(self):
        sets = [set(self.train), set(self.val_id), set(self.val_ood)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValueError("split id sets must be disjoint")

    def to_dict(self) -> dict:
        return {
            "train": list(self.train),
            "val_id": list(self.val_id),
            "val_ood": list(self.val_ood),
            "criteria": self.criteria,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(train=list(d["train"]), val_id=list(d["val_id"]),
                   val_ood=list(d["val_ood"]), criteria=dict(d.get("criteria", {})))


# -- generation ------------------------------------------------------------


def _smooth_field(rng: np.random.Generator, size: int, passes: int = 6) -> np.ndarray:
    """Zero-mean, unit-variance smooth spatial random field."""
    f = rng.normal(size=(size, size))
    kernel = np.array([1.0, 2.0, 1.0]) / 4.0
    for _ in range(passes):
        f = np.apply_along_axis(lambda r: np.convolve(np.pad(r, 1, mode="edge"), kernel, "valid"), 0, f)
        f = np.apply_along_axis(lambda r: np.convolve(np.pad(r, 1, mode="edge"), kernel, "valid"), 1, f)
    f -= f.mean()
    std = f.std()
    return f / std if std > 0 else f


def _environment(lon: np.ndarray, lat: np.ndarray, phase: float = 0.0) -> np.ndarray:
    """Deterministic smooth environment driver over the lon/lat domain."""
    return np.sin(2.0 * np.pi * lon / 30.0 + phase) * np.cos(2.0 * np.pi * lat / 25.0 + phase)


def _footprint_mask(rng: np.random.Generator, size: int, radius: int, count: int) -> np.ndarray:
    """Disjoint circular footprints; falls back to overlap after 200 tries."""
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    placed = 0
    tries = 0
    while placed < count:
        cy = rng.integers(radius, size - radius)
        cx = rng.integers(radius, size - radius)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        tries += 1
        if not (mask & disk).any() or tries > 200:
            mask |= disk
            placed += 1
    return mask


def _block_mask(rng: np.random.Generator, size: int, block: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    y0 = int(rng.integers(0, size - block + 1))
    x0 = int(rng.integers(0, size - block + 1))
    mask[y0 : y0 + block, x0 : x0 + block] = True
    return mask


def _generate_record(cfg: SynthConfig, proc: ProcessSpec, index: int, plot_like: bool) -> PatchRecord:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    s = cfg.patch_size
    pixel_deg = 0.00025  # ~25 m pixels

    lon_c = rng.uniform(*cfg.lon_range)
    lat_c = rng.uniform(*cfg.lat_range)
    offsets = (np.arange(s) - s / 2.0) * pixel_deg
    lon = lon_c + offsets[None, :]
    lat = lat_c + offsets[:, None]

    env_cov = _environment(lon, lat) + 0.8 * _smooth_field(rng, s)
    env_stems = _environment(lon, lat, phase=1.7) + 0.8 * _smooth_field(rng, s)

    c_raw = proc.cover_base + proc.cover_env * env_cov + proc.cover_field * _smooth_field(rng, s)
    # round each causal variable to storage precision before its children use
    # it, so stored labels satisfy the mechanism exactly at zero noise
    cover = (100.0 / (1.0 + np.exp(-c_raw))).astype(np.float32).astype(np.float64)

    height = proc.height_a * (cover / 100.0) ** proc.height_b * proc.h_max
    if proc.noise_height > 0:
        height = height + proc.noise_height * _smooth_field(rng, s)
    height = np.maximum(height, 0.0).astype(np.float32).astype(np.float64)

    log_stems = proc.stems_log_mean + proc.stems_env * env_stems
    if proc.noise_stems > 0:
        log_stems = log_stems + proc.noise_stems * _smooth_field(rng, s)
    stems = np.exp(log_stems).astype(np.float32).astype(np.float64)

    agbd_true = proc.agbd_mechanism(cover, height, stems)
    agbd = agbd_true.copy()
    if proc.noise_agbd_pixel > 0:
        agbd = agbd + proc.noise_agbd_pixel * rng.normal(size=(s, s))
    if proc.noise_agbd_record > 0:
        agbd = agbd + proc.noise_agbd_record * rng.normal()
    agbd = np.maximum(agbd, 0.0)

    sar = np.empty((N_SAR, s, s))
    for c in range(N_SAR):
        clean = proc.sar_scale[c] * (1.0 - np.exp(-proc.sar_rate[c] * agbd_true))
        if proc.sar_speckle > 0:
            speckle = np.exp(proc.sar_speckle * rng.normal(size=(s, s)) - proc.sar_speckle**2 / 2.0)
        else:
            speckle = 1.0
        sar[c] = clean * speckle

    soil_mod = 1.0 + proc.opt_soil_env * _environment(lon, lat, phase=3.1)
    frac = cover / 100.0
    opt = np.empty((N_OPT, s, s))
    for j in range(N_OPT):
        opt[j] = proc.opt_veg[j] * frac + proc.opt_soil[j] * soil_mod * (1.0 - frac)
        if proc.noise_optical > 0:
            opt[j] += proc.noise_optical * rng.normal(size=(s, s))

    if plot_like:
        block = _block_mask(rng, s, cfg.plot_block_size_px)
        masks = np.stack([np.zeros((s, s), bool), np.zeros((s, s), bool), block, block])
    else:
        fp = _footprint_mask(rng, s, cfg.footprint_radius_px, cfg.footprints_per_patch)
        masks = np.stack([fp, fp, np.zeros((s, s), bool), np.zeros((s, s), bool)])

    return PatchRecord(
        inputs=np.concatenate([sar, opt]).astype(np.float32),
        position=np.array([lon_c, lat_c], dtype=np.float32),
        labels=np.stack([cover, height, stems, agbd]).astype(np.float32),
        masks=masks,
        latents=np.stack([cover, height, stems]).astype(np.float32),
        census_tag=int(rng.integers(2014, 2024)),
    )


def generate_synthetic(cfg: SynthConfig, proc: ProcessSpec):
    """Generate the full dataset plus normalization stats and the split.

    Deterministic for a fixed config seed; each record draws from an
    independent stream seeded by (seed, record_index).
    """
    cfg.validate()
    proc.validate()
    records = [
        _generate_record(cfg, proc, i, plot_like=(i >= cfg.n_gedi_like))
        for i in range(cfg.n_gedi_like + cfg.n_plot_like)
    ]
    split = split_id_ood(records, cfg)
    stats = compute_norm_stats([records[i] for i in split.train])
    return records, stats, split


# -- splitting -------------------------------------------------------------


def _in_box(position: np.ndarray, box) -> bool:
    lon, lat = float(position[0]), float(position[1])
    return box[0] <= lon <= box[1] and box[2] <= lat <= box[3]


def split_id_ood(records, cfg: SynthConfig) -> SplitSpec:
    """Train/val split with OOD flagging by spatial box and stems isolation.

    Records inside the OOD box never enter training.  Validation records
    are OOD if inside the box or if their mean true stems density falls
    outside the training stems quantile band.
    """
    if not records:
        raise EmptyValidationError("no records to split")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD157]))

    in_box = [i for i, r in enumerate(records) if _in_box(r.position, cfg.ood_region)]
    outside = [i for i in range(len(records)) if i not in set(in_box)]
    perm = rng.permutation(len(outside))
    n_val = max(1, int(round(cfg.val_fraction * len(outside))))
    val_outside = [outside[i] for i in perm[:n_val]]
    train = sorted(outside[i] for i in perm[n_val:])

    def mean_stems(i):
        r = records[i]
        src = r.latents[2] if r.latents is not None else r.labels[STEMS]
        return float(src.mean())

    train_stems = np.array([mean_stems(i) for i in train])
    qlo, qhi = np.quantile(train_stems, cfg.stems_quantiles)

    val_ood, val_id = [], []
    for i in sorted(val_outside + in_box):
        ms = mean_stems(i)
        if i in set(in_box) or ms < qlo or ms > qhi:
            val_ood.append(i)
        else:
            val_id.append(i)
    if not val_id and not val_ood:
        raise EmptyValidationError("validation set is empty")

    spec = SplitSpec(
        train=train,
        val_id=val_id,
        val_ood=val_ood,
        criteria={
            "ood_region": list(cfg.ood_region),
            "stems_quantiles": list(cfg.stems_quantiles),
            "stems_bounds": [float(qlo), float(qhi)],
        },
    )
    spec.validate()
    return spec


# -- normalization ---------------------------------------------------------


def compute_norm_stats(train_records) -> NormStats:
    """Channel stats from training records only; label stats over valid pixels."""
    if not train_records:
        raise ValueError("cannot compute stats from an empty training split")
    inputs = np.stack([r.inputs for r in train_records]).astype(np.float64)
    pos = np.stack([r.position for r in train_records]).astype(np.float64)

    in_mean = inputs.mean(axis=(0, 2, 3))
    in_std = inputs.std(axis=(0, 2, 3))
    pos_mean = pos.mean(axis=0)
    pos_std = pos.std(axis=0)

    lab_mean = np.zeros(4)
    lab_std = np.zeros(4)
    for k in range(4):
        vals = np.concatenate(
            [r.labels[k][r.masks[k]].astype(np.float64) for r in train_records]
        )
        if vals.size == 0:
            # no supervision for this label in the split; keep identity transform
            lab_mean[k], lab_std[k] = 0.0, 1.0
            continue
        lab_mean[k] = vals.mean()
        lab_std[k] = vals.std()

    for name, std in (("input", in_std), ("position", pos_std), ("label", lab_std)):
        if np.any(std <= 0):
            raise ZeroVarianceError(f"zero-variance {name} channel: {np.where(std <= 0)[0].tolist()}")
    return NormStats(in_mean, in_std, pos_mean, pos_std, lab_mean, lab_std)


def apply_normalization(record: PatchRecord, stats: NormStats) -> PatchRecord:
    """Standardize inputs and labels; positions stay in raw degrees (the
    positional encoder consumes degrees directly)."""
    inputs = (record.inputs.astype(np.float64) - stats.input_mean[:, None, None]) / stats.input_std[:, None, None]
    labels = (record.labels.astype(np.float64) - stats.label_mean[:, None, None]) / stats.label_std[:, None, None]
    return replace(record, inputs=inputs, labels=labels)


def invert_normalization(record: PatchRecord, stats: NormStats) -> PatchRecord:
    inputs = record.inputs * stats.input_std[:, None, None] + stats.input_mean[:, None, None]
    labels = record.labels * stats.label_std[:, None, None] + stats.label_mean[:, None, None]
    return replace(record, inputs=inputs, labels=labels)


def denorm_label(values: np.ndarray, stats: NormStats, label: int) -> np.ndarray:
    return values * stats.label_std[label] + stats.label_mean[label]


# -- container format ------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


def _pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.reshape(-1)).tobytes()


def _unpack_mask(buf: bytes, h: int, w: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), count=h * w)
    return bits.astype(bool).reshape(h, w)


def write_dataset(records, path) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for r in records:
        h, w = r.labels.shape[1:]
        chunks.append(struct.pack("<HHI", h, w, r.census_tag))
        chunks.append(np.ascontiguousarray(r.inputs, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(r.position, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(r.labels, dtype="<f4").tobytes())
        if r.latents is None:
            chunks.append(b"\x00")
        else:
            chunks.append(b"\x01")
            chunks.append(np.ascontiguousarray(r.latents, dtype="<f4").tobytes())
        for k in range(4):
            chunks.append(_pack_mask(r.masks[k]))
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<Q", fnv1a(payload)))


def read_dataset(path):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a PGCB dataset file")
    if len(blob) < 12 + 8:
        raise TruncatedPayloadError("file too short")
    payload, (checksum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a(payload) != checksum:
        raise ChecksumError("FNV-1a checksum mismatch")
    version, count = struct.unpack("<II", payload[4:12])
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")

    off = 12
    records = []

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise TruncatedPayloadError("record payload truncated")
        buf = payload[off : off + n]
        off += n
        return buf

    for _ in range(count):
        h, w, tag = struct.unpack("<HHI", take(8))
        plane = h * w * 4
        inputs = np.frombuffer(take(N_INPUT * plane), dtype="<f4").reshape(N_INPUT, h, w)
        pos = np.frombuffer(take(8), dtype="<f4").copy()
        labels = np.frombuffer(take(4 * plane), dtype="<f4").reshape(4, h, w)
        flag = take(1)[0]
        latents = None
        if flag == 1:
            latents = np.frombuffer(take(3 * plane), dtype="<f4").reshape(3, h, w).copy()
        mask_bytes = (h * w + 7) // 8
        masks = np.stack([_unpack_mask(take(mask_bytes), h, w) for _ in range(4)])
        records.append(PatchRecord(inputs.copy(), pos, labels.copy(), masks, latents, int(tag)))
    if off != len(payload):
        raise TruncatedPayloadError("trailing bytes after last record")
    return records
