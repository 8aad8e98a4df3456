"""Feature sources and the width-unifying projection.

Two sources produce :class:`NewsRecord` lists: a seeded synthetic generator and
a loader for the binary embedding format written by :func:`write_embeddings`.

Embedding file layout (little-endian)::

    b"RCMC"  u32 version=1  u32 n1  u32 n2  u32 n_raw  u64 count
    count x ( u16 id_len, id utf-8, u8 label,
              f32[n1] text_fine, f32[n_raw] text_coarse,
              f32[n2] image_fine, f32[n_raw] image_coarse )
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from racmc.errors import DataError, DimensionError
from racmc.nn import Linear, Module
from racmc.tensor import Tensor

MAGIC = b"RCMC"
VERSION = 1
FAKE, REAL = 0, 1

_HEADER = struct.Struct("<4sIIIIQ")


@dataclass
class NewsRecord:
    id: str
    label: int
    text_fine: np.ndarray
    text_coarse: np.ndarray
    image_fine: np.ndarray
    image_coarse: np.ndarray

    @property
    def dims(self) -> tuple[int, int, int]:
        return len(self.text_fine), len(self.image_fine), len(self.text_coarse)


@dataclass
class SynthConfig:
    n_real: int = 200
    n_fake: int = 200
    n1: int = 24
    n2: int = 32
    n_raw: int = 16
    delta: float = 1.0
    rho: float = 0.5
    noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if min(self.n1, self.n2, self.n_raw) < 1:
            raise ValueError("synthetic dims must be positive")
        if self.n_real < 0 or self.n_fake < 0 or self.n_real + self.n_fake == 0:
            raise ValueError("synthetic dataset would be empty")
        if self.delta < 0 or not 0.0 <= self.rho <= 1.0 or self.noise <= 0:
            raise ValueError(f"bad synthetic parameters: delta={self.delta} rho={self.rho} "
                             f"noise={self.noise}")


def _unit(rng: np.random.Generator, n: int) -> np.ndarray:
    u = rng.standard_normal(n)
    return u / np.linalg.norm(u)


def synth_generate(cfg: SynthConfig) -> list[NewsRecord]:
    """Class-separated, pair-coupled synthetic records.

    Every block is ``sign * delta * u_block + noise * (rho * shared + sqrt(1 - rho^2) * own)``
    with ``sign = +1`` for real and ``-1`` for fake.  ``shared`` comes from one
    latent draw per record, pushed through a fixed map per block; both coarse
    blocks live in one joint space (same direction, same latent map), the way
    a joint text-image embedding would.  Values are rounded to float32 so the
    records survive the embedding file bit-for-bit.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_raw
    u_tf, u_if, u_c = _unit(rng, cfg.n1), _unit(rng, cfg.n2), _unit(rng, cfg.n_raw)
    p_tf = rng.standard_normal((cfg.n1, k)) / np.sqrt(k)
    p_if = rng.standard_normal((cfg.n2, k)) / np.sqrt(k)
    own = np.sqrt(1.0 - cfg.rho ** 2)

    labels = np.array([REAL] * cfg.n_real + [FAKE] * cfg.n_fake)
    labels = labels[rng.permutation(len(labels))]
    records = []
    for i, label in enumerate(labels):
        sign = 1.0 if label == REAL else -1.0
        z = rng.standard_normal(k)

        def block(u, shared, n):
            x = sign * cfg.delta * u + cfg.noise * (cfg.rho * shared + own * rng.standard_normal(n))
            return x.astype(np.float32).astype(np.float64)

        records.append(NewsRecord(
            id=f"syn-{i:05d}",
            label=int(label),
            text_fine=block(u_tf, p_tf @ z, cfg.n1),
            text_coarse=block(u_c, z, cfg.n_raw),
            image_fine=block(u_if, p_if @ z, cfg.n2),
            image_coarse=block(u_c, z, cfg.n_raw),
        ))
    return records


def stratified_split(records: Sequence[NewsRecord], test_real: int, test_fake: int):
    """Last ``test_real`` real and last ``test_fake`` fake records become the test set."""
    real = [r for r in records if r.label == REAL]
    fake = [r for r in records if r.label == FAKE]
    if test_real > len(real) or test_fake > len(fake):
        raise DataError(f"cannot hold out {test_real}/{test_fake} from {len(real)}/{len(fake)} records")
    test_ids = {r.id for r in real[len(real) - test_real:]} | {r.id for r in fake[len(fake) - test_fake:]}
    train = [r for r in records if r.id not in test_ids]
    test = [r for r in records if r.id in test_ids]
    return train, test


# ---------------------------------------------------------------- file format


def write_embeddings(path, records: Sequence[NewsRecord], dims: tuple[int, int, int] | None = None) -> None:
    if dims is None:
        if not records:
            raise DataError("cannot infer dims of an empty record list; pass dims")
        dims = records[0].dims
    n1, n2, n_raw = dims
    parts = [_HEADER.pack(MAGIC, VERSION, n1, n2, n_raw, len(records))]
    for i, r in enumerate(records):
        if r.dims != (n1, n2, n_raw):
            raise DataError(f"record {i} ({r.id}) has dims {r.dims}, expected {dims}")
        if r.label not in (FAKE, REAL):
            raise DataError(f"record {i} ({r.id}) has label {r.label}")
        rid = r.id.encode("utf-8")
        parts.append(struct.pack("<H", len(rid)) + rid + struct.pack("<B", r.label))
        for vec in (r.text_fine, r.text_coarse, r.image_fine, r.image_coarse):
            parts.append(np.asarray(vec, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path) -> list[NewsRecord]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: file too short for header")
    magic, version, n1, n2, n_raw, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    sizes = (n1, n_raw, n2, n_raw)
    pos = _HEADER.size
    records = []
    for i in range(count):
        try:
            (id_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            rid = buf[pos:pos + id_len].decode("utf-8")
            pos += id_len
            (label,) = struct.unpack_from("<B", buf, pos)
            pos += 1
        except struct.error as exc:
            raise DataError(f"record {i}: truncated header") from exc
        vecs = []
        for n in sizes:
            end = pos + 4 * n
            if end > len(buf):
                raise DataError(f"record {i}: truncated vector (need {n} floats)")
            vecs.append(np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64))
            pos = end
        if label not in (FAKE, REAL):
            raise DataError(f"record {i} ({rid}): label {label} not in {{0, 1}}")
        if not all(np.isfinite(v).all() for v in vecs):
            raise DataError(f"record {rid}: non-finite value")
        records.append(NewsRecord(rid, label, *vecs))
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes after {count} records")
    return records


# ---------------------------------------------------------------- batching


@dataclass
class RecordArrays:
    """Column-stacked record blocks; fields may be arrays or (for gradient checks) tensors."""

    text_fine: np.ndarray | Tensor
    text_coarse: np.ndarray | Tensor
    image_fine: np.ndarray | Tensor
    image_coarse: np.ndarray | Tensor
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[NewsRecord]) -> "RecordArrays":
        if not records:
            raise DataError("empty record list")
        dims = records[0].dims
        for i, r in enumerate(records):
            if r.dims != dims:
                raise DimensionError(f"record {i} ({r.id}) has dims {r.dims}, expected {dims}")
            if r.label not in (FAKE, REAL):
                raise DataError(f"record {i} ({r.id}) has label {r.label}")
        return cls(
            text_fine=np.stack([r.text_fine for r in records]),
            text_coarse=np.stack([r.text_coarse for r in records]),
            image_fine=np.stack([r.image_fine for r in records]),
            image_coarse=np.stack([r.image_coarse for r in records]),
            labels=np.array([r.label for r in records], dtype=np.int64),
            ids=[r.id for r in records],
        )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.text_fine.shape[1], self.image_fine.shape[1], self.text_coarse.shape[1]

    def subset(self, idx) -> "RecordArrays":
        idx = np.asarray(idx)
        return RecordArrays(self.text_fine[idx], self.text_coarse[idx], self.image_fine[idx],
                            self.image_coarse[idx], self.labels[idx], [self.ids[i] for i in idx])


@dataclass
class EncodedBatch:
    T_f: Tensor
    I_f: Tensor
    T_f_proj: Tensor
    T_c: Tensor
    I_f_proj: Tensor
    I_c: Tensor
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)


class Projections(Module):
    """Learnable maps from every raw block width to the common width ``dim``."""

    def __init__(self, n1: int, n2: int, n_raw: int, dim: int, rng: np.random.Generator):
        self.text_fine = Linear(n1, dim, rng)
        self.text_coarse = Linear(n_raw, dim, rng)
        self.image_fine = Linear(n2, dim, rng)
        self.image_coarse = Linear(n_raw, dim, rng)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def encode_batch(records, proj: Projections) -> EncodedBatch:
    if not isinstance(records, RecordArrays):
        records = RecordArrays.from_records(records)
    n1, n2, n_raw = records.dims
    want = (proj.text_fine.weight.shape[0], proj.image_fine.weight.shape[0],
            proj.text_coarse.weight.shape[0])
    if (n1, n2, n_raw) != want:
        raise DimensionError(f"record dims {(n1, n2, n_raw)} do not match projection dims {want}")
    t_f, i_f = _as_tensor(records.text_fine), _as_tensor(records.image_fine)
    t_c, i_c = _as_tensor(records.text_coarse), _as_tensor(records.image_coarse)
    return EncodedBatch(
        T_f=t_f,
        I_f=i_f,
        T_f_proj=proj.text_fine(t_f),
        T_c=proj.text_coarse(t_c),
        I_f_proj=proj.image_fine(i_f),
        I_c=proj.image_coarse(i_c),
        labels=np.asarray(records.labels),
    )
