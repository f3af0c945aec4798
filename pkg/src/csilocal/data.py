"""Synthetic CSI data: multipath generation, angular-delay conversion,
min-max normalization, non-IID partitioning and a binary dataset format.

The generator is a stand-in for the measured indoor/outdoor corpora: a sum
of complex paths with environment-dependent path count and delay spread,
which reproduces the indoor-vs-outdoor difficulty gap without claiming
ray-tracing fidelity. Externally converted data can be read from the same
binary format instead.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import CsiDims

MAGIC = b"CSID"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIII")  # magic, version, samples, channels, n_t, n_c

ENVIRONMENTS = ("indoor", "outdoor")


class DataError(Exception):
    pass


class InsufficientDataError(DataError):
    """The sample pool cannot satisfy the requested partition."""


class ZeroDynamicRangeError(DataError):
    """Min-max normalization of a constant dataset is undefined."""


class DatasetFormatError(DataError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class EnvProfile:
    """Multipath constants for one propagation environment."""

    paths: int
    delay_spread: float          # fraction of the symbol window
    sector_half_angle: float = np.pi / 3.0   # 120 degree sector


ENV_PROFILES = {
    "indoor": EnvProfile(paths=3, delay_spread=1.0 / 8.0),
    "outdoor": EnvProfile(paths=8, delay_spread=1.0 / 2.0),
}


def channel_from_paths(gains: np.ndarray, angles: np.ndarray, delays: np.ndarray,
                       dims: CsiDims) -> np.ndarray:
    """Sum over paths of gain * antenna steering phase * subcarrier delay phase.

    Half-wavelength array steering over n_t antennas; delays are fractions
    of the symbol window, i.e. a unit delay wraps once across subcarriers.
    """
    t = np.arange(dims.n_t)
    c = np.arange(dims.n_c)
    steer = np.exp(-1j * np.pi * np.outer(np.sin(angles), t))        # (L, n_t)
    phase = np.exp(-2j * np.pi * np.outer(delays, c))                # (L, n_c)
    return np.einsum("l,lt,lc->tc", gains, steer, phase)


def synth_channel(env: str, dims: CsiDims, seed) -> np.ndarray:
    """One spatial-frequency channel matrix, deterministic per (env, dims, seed)."""
    if env not in ENV_PROFILES:
        raise DataError(f"unknown environment '{env}'")
    prof = ENV_PROFILES[env]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    L = prof.paths
    delays = rng.uniform(0.0, prof.delay_spread, size=L)
    angles = rng.uniform(-prof.sector_half_angle, prof.sector_half_angle, size=L)
    # complex normal gains weighted by an exponential delay-power profile
    power = np.exp(-3.0 * delays / prof.delay_spread)
    power /= power.sum()
    gains = np.sqrt(power / 2.0) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
    return channel_from_paths(gains, angles, delays, dims)


def dft2_angular_delay(h: np.ndarray) -> np.ndarray:
    """Unitary DFT along antennas, inverse-unitary along subcarriers."""
    return np.fft.ifft(np.fft.fft(h, axis=0, norm="ortho"), axis=1, norm="ortho")


def to_real_sample(a: np.ndarray) -> np.ndarray:
    """Stack real and imaginary parts into a (2, n_t, n_c) float32 tensor."""
    return np.stack([a.real, a.imag]).astype(np.float32)


def synth_samples(env: str, dims: CsiDims, count: int, seed: int) -> np.ndarray:
    """Angular-delay samples (count, 2, n_t, n_c); sample i derives its own
    stream from (seed, i) so generation order cannot matter."""
    out = np.empty((count, 2, dims.n_t, dims.n_c), dtype=np.float32)
    for i in range(count):
        h = synth_channel(env, dims, seed=[seed, i])
        out[i] = to_real_sample(dft2_angular_delay(h))
    return out


@dataclass(frozen=True)
class NormalizationRecord:
    offset: float
    scale: float


def normalize_minmax(samples: np.ndarray) -> tuple[np.ndarray, NormalizationRecord]:
    """Affine map of the whole set into [0, 1] using the global min/max."""
    if samples.size == 0:
        raise DataError("cannot normalize an empty sample set")
    lo = float(samples.min())
    hi = float(samples.max())
    if hi <= lo:
        raise ZeroDynamicRangeError(f"zero dynamic range: min == max == {lo}")
    record = NormalizationRecord(offset=lo, scale=hi - lo)
    return ((samples - lo) / (hi - lo)).astype(samples.dtype), record


def denormalize(samples: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    return samples * record.scale + record.offset


@dataclass
class DatasetShard:
    """One UE's local samples plus provenance tags."""

    ue_id: int
    data: np.ndarray                       # (M, 2, n_t, n_c) float32
    env_tags: list[str]
    sample_ids: list[tuple[str, int]] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.data.shape[0] != len(self.env_tags):
            raise DataError(
                f"shard {self.ue_id}: {self.data.shape[0]} samples vs {len(self.env_tags)} tags")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def mixture(self) -> tuple[int, int]:
        ind = sum(1 for t in self.env_tags if t == "indoor")
        return ind, len(self.env_tags) - ind


@dataclass(frozen=True)
class PartitionSpec:
    """Per-UE indoor:outdoor ratios (each pair sums to 10) and shard size."""

    ratios: tuple[tuple[float, float], ...]
    samples_per_ue: int
    seed: int = 0

    def __post_init__(self):
        for pair in self.ratios:
            if abs(pair[0] + pair[1] - 10.0) > 1e-9:
                raise DataError(f"ratio pair {pair} does not sum to 10")
        if self.samples_per_ue < 1:
            raise DataError("samples_per_ue must be >= 1")

    @classmethod
    def heterogeneous_table(cls, samples_per_ue: int, seed: int = 0) -> "PartitionSpec":
        """The ten-UE mixture table: 9.5:0.5 down to 0.5:9.5."""
        ratios = tuple((9.5 - i, 0.5 + i) for i in range(10))
        return cls(ratios, samples_per_ue, seed)

    @classmethod
    def iid(cls, n_ues: int, samples_per_ue: int, seed: int = 0) -> "PartitionSpec":
        return cls(tuple((5.0, 5.0) for _ in range(n_ues)), samples_per_ue, seed)


@dataclass
class SamplePool:
    indoor: np.ndarray
    outdoor: np.ndarray


def partition_noniid(pool: SamplePool, spec: PartitionSpec) -> list[DatasetShard]:
    """Draw round(M * r/10) indoor plus the remainder outdoor per UE,
    without replacement across shards."""
    m = spec.samples_per_ue
    wanted_indoor = [int(round(m * r_in / 10.0)) for r_in, _ in spec.ratios]
    wanted_outdoor = [m - w for w in wanted_indoor]
    if sum(wanted_indoor) > pool.indoor.shape[0]:
        raise InsufficientDataError(
            f"need {sum(wanted_indoor)} indoor samples, pool has {pool.indoor.shape[0]}")
    if sum(wanted_outdoor) > pool.outdoor.shape[0]:
        raise InsufficientDataError(
            f"need {sum(wanted_outdoor)} outdoor samples, pool has {pool.outdoor.shape[0]}")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xDA7A]))
    indoor_order = rng.permutation(pool.indoor.shape[0])
    outdoor_order = rng.permutation(pool.outdoor.shape[0])
    shards = []
    used_in = used_out = 0
    for ue_id, (n_in, n_out) in enumerate(zip(wanted_indoor, wanted_outdoor)):
        pick_in = indoor_order[used_in:used_in + n_in]
        pick_out = outdoor_order[used_out:used_out + n_out]
        used_in += n_in
        used_out += n_out
        data = np.concatenate([pool.indoor[pick_in], pool.outdoor[pick_out]], axis=0)
        tags = ["indoor"] * n_in + ["outdoor"] * n_out
        ids = [("indoor", int(i)) for i in pick_in] + [("outdoor", int(i)) for i in pick_out]
        # shuffle within the shard so batches mix environments
        order = rng.permutation(data.shape[0])
        shards.append(DatasetShard(ue_id, data[order],
                                   [tags[i] for i in order],
                                   [ids[i] for i in order]))
    return shards


# ---------------------------------------------------------------------------
# binary dataset file
# ---------------------------------------------------------------------------

def write_dataset(path, shards: Sequence[DatasetShard],
                  normalization: Optional[NormalizationRecord] = None) -> None:
    """Binary file: 24-byte header then little-endian float32 payload,
    sample-major; shard boundaries and tags go to a sidecar text file."""
    path = Path(path)
    if not shards:
        raise DataError("refusing to write an empty dataset")
    n_t, n_c = shards[0].data.shape[2], shards[0].data.shape[3]
    total = sum(s.count for s in shards)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, total, 2, n_t, n_c))
        for s in shards:
            if s.data.shape[1:] != (2, n_t, n_c):
                raise DataError(f"shard {s.ue_id} has shape {s.data.shape}")
            fh.write(np.ascontiguousarray(s.data, dtype="<f4").tobytes())
    meta = {
        "shards": [{"ue_id": s.ue_id, "count": s.count, "split": s.split,
                    "env_tags": s.env_tags} for s in shards],
        "normalization": None if normalization is None else
            {"offset": normalization.offset, "scale": normalization.scale},
    }
    Path(str(path) + ".meta").write_text(json.dumps(meta, indent=1))


def read_dataset(path) -> tuple[list[DatasetShard], Optional[NormalizationRecord]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, total, channels, n_t, n_c = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expected = HEADER.size + 4 * total * channels * n_t * n_c
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(total, channels, n_t, n_c)

    meta_path = Path(str(path) + ".meta")
    if not meta_path.exists():
        raise DatasetFormatError(f"missing sidecar file {meta_path}")
    meta = json.loads(meta_path.read_text())
    norm = None
    if meta.get("normalization"):
        norm = NormalizationRecord(meta["normalization"]["offset"], meta["normalization"]["scale"])
    shards = []
    offset = 0
    for rec in meta["shards"]:
        count = rec["count"]
        shards.append(DatasetShard(rec["ue_id"], np.array(data[offset:offset + count]),
                                   list(rec["env_tags"]), split=rec.get("split", "train")))
        offset += count
    if offset != total:
        raise DatasetFormatError(f"sidecar counts {offset} samples, file has {total}")
    return shards, norm


# ---------------------------------------------------------------------------
# end-to-end generation for an experiment
# ---------------------------------------------------------------------------

@dataclass
class GeneratedDataset:
    train_shards: list[DatasetShard]
    test_shards: list[DatasetShard]
    normalization: NormalizationRecord


def generate_dataset(environment: str, dims: CsiDims, n_ues: int, samples_per_ue: int,
                     test_samples_per_ue: int, seed: int,
                     ratios: Optional[Sequence[tuple[float, float]]] = None) -> GeneratedDataset:
    """Generate, convert, normalize and partition one experiment's data.

    ``environment`` is 'indoor', 'outdoor', or 'noniid'. Non-IID training
    shards follow the mixture table (per-UE ratios); test shards stay 1:1
    so every UE is scored on the same distribution.
    """
    if environment == "noniid":
        if ratios is None:
            if n_ues != 10:
                raise DataError("the default non-IID mixture table needs 10 UEs; pass explicit ratios")
            train_spec = PartitionSpec.heterogeneous_table(samples_per_ue, seed)
        else:
            train_spec = PartitionSpec(tuple(tuple(r) for r in ratios), samples_per_ue, seed)
        test_spec = PartitionSpec.iid(n_ues, test_samples_per_ue, seed + 1)
    elif environment in ENVIRONMENTS:
        single = (10.0, 0.0) if environment == "indoor" else (0.0, 10.0)
        train_spec = PartitionSpec(tuple(single for _ in range(n_ues)), samples_per_ue, seed)
        test_spec = PartitionSpec(tuple(single for _ in range(n_ues)), test_samples_per_ue, seed + 1)
    else:
        raise DataError(f"unknown environment '{environment}'")

    def needed(spec: PartitionSpec) -> tuple[int, int]:
        n_in = sum(int(round(spec.samples_per_ue * r / 10.0)) for r, _ in spec.ratios)
        return n_in, spec.samples_per_ue * len(spec.ratios) - n_in

    tr_in, tr_out = needed(train_spec)
    te_in, te_out = needed(test_spec)
    indoor = synth_samples("indoor", dims, tr_in + te_in, seed=seed * 2 + 1) \
        if tr_in + te_in else np.empty((0, 2, dims.n_t, dims.n_c), np.float32)
    outdoor = synth_samples("outdoor", dims, tr_out + te_out, seed=seed * 2 + 2) \
        if tr_out + te_out else np.empty((0, 2, dims.n_t, dims.n_c), np.float32)

    stacked = np.concatenate([indoor.reshape(-1), outdoor.reshape(-1)])
    _, record = normalize_minmax(stacked)
    indoor = ((indoor - record.offset) / record.scale).astype(np.float32)
    outdoor = ((outdoor - record.offset) / record.scale).astype(np.float32)

    train_pool = SamplePool(indoor[:tr_in], outdoor[:tr_out])
    test_pool = SamplePool(indoor[tr_in:], outdoor[tr_out:])
    train_shards = partition_noniid(train_pool, train_spec)
    test_shards = partition_noniid(test_pool, test_spec)
    for s in test_shards:
        s.split = "test"
    return GeneratedDataset(train_shards, test_shards, record)
