import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racmc.encoders import (
    FAKE,
    REAL,
    NewsRecord,
    Projections,
    RecordArrays,
    SynthConfig,
    encode_batch,
    load_embeddings,
    stratified_split,
    synth_generate,
    write_embeddings,
)
from racmc.errors import DataError, DimensionError
from racmc.tensor import Tensor


def blocks(records, name):
    return np.stack([getattr(r, name) for r in records])


def by_label(records, label):
    return [r for r in records if r.label == label]


# ---------------------------------------------------------------- synth


@pytest.mark.parametrize("name", ["text_fine", "text_coarse", "image_fine", "image_coarse"])
def test_synth_no_separation_means_indistinguishable(name):
    cfg = SynthConfig(n_real=400, n_fake=400, delta=0.0, rho=0.0, noise=1.0, seed=3)
    recs = synth_generate(cfg)
    diff = blocks(by_label(recs, REAL), name).mean(0) - blocks(by_label(recs, FAKE), name).mean(0)
    # difference of two independent means: sd = noise * sqrt(2 / count)
    bound = 3 * cfg.noise * np.sqrt(2.0 / 400)
    assert np.all(np.abs(diff) < bound)


def test_synth_nearest_centroid_separable():
    cfg = SynthConfig(n_real=300, n_fake=300, delta=10.0, noise=0.1, seed=5)
    recs = synth_generate(cfg)
    train, test = recs[:300], recs[300:]
    c_real = blocks(by_label(train, REAL), "text_fine").mean(0)
    c_fake = blocks(by_label(train, FAKE), "text_fine").mean(0)
    x = blocks(test, "text_fine")
    pred = np.where(np.linalg.norm(x - c_real, axis=1) < np.linalg.norm(x - c_fake, axis=1), REAL, FAKE)
    assert np.mean(pred == np.array([r.label for r in test])) >= 0.99


def test_synth_deterministic(tmp_path):
    cfg = SynthConfig(n_real=20, n_fake=15, seed=9)
    write_embeddings(tmp_path / "a.bin", synth_generate(cfg))
    write_embeddings(tmp_path / "b.bin", synth_generate(cfg))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_synth_counts_and_dims():
    recs = synth_generate(SynthConfig(n_real=7, n_fake=5, n1=3, n2=4, n_raw=2))
    assert len(by_label(recs, REAL)) == 7 and len(by_label(recs, FAKE)) == 5
    assert all(r.dims == (3, 4, 2) for r in recs)
    assert len({r.id for r in recs}) == 12


@pytest.mark.parametrize("kwargs", [dict(n1=0), dict(noise=0.0), dict(rho=1.5), dict(delta=-1.0),
                                    dict(n_real=0, n_fake=0)])
def test_synth_rejects_bad_config(kwargs):
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(**kwargs))


def cosine_rows(a, b):
    return (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


@pytest.mark.parametrize("rho", [0.6, 0.9])
def test_synth_matched_pairs_more_similar(rho):
    recs = synth_generate(SynthConfig(n_real=300, n_fake=300, delta=1.0, rho=rho, seed=2))
    data = RecordArrays.from_records(recs)
    # a shared projection keeps both coarse blocks in one space
    w = np.random.default_rng(0).standard_normal((data.dims[2], 16))
    t, i = data.text_coarse @ w, data.image_coarse @ w
    matched = cosine_rows(t, i).mean()
    sims = cosine_rows(t[:, None, :], i[None, :, :])
    mismatched = (sims.sum() - np.trace(sims)) / (len(t) * (len(t) - 1))
    assert matched > mismatched


def test_stratified_split_sizes():
    recs = synth_generate(SynthConfig(n_real=30, n_fake=20))
    train, test = stratified_split(recs, 10, 5)
    assert len(by_label(test, REAL)) == 10 and len(by_label(test, FAKE)) == 5
    assert len(train) == 35
    assert not {r.id for r in train} & {r.id for r in test}


def test_stratified_split_too_many():
    with pytest.raises(DataError):
        stratified_split(synth_generate(SynthConfig(n_real=3, n_fake=3)), 4, 1)


# ---------------------------------------------------------------- file format


def make_records(rng, count, dims=(4, 6, 4)):
    n1, n2, n_raw = dims
    out = []
    for i in range(count):
        out.append(NewsRecord(
            id=f"rec-{i}-ü",
            label=int(rng.integers(0, 2)),
            text_fine=rng.standard_normal(n1).astype(np.float32).astype(np.float64),
            text_coarse=rng.standard_normal(n_raw).astype(np.float32).astype(np.float64),
            image_fine=rng.standard_normal(n2).astype(np.float32).astype(np.float64),
            image_coarse=rng.standard_normal(n_raw).astype(np.float32).astype(np.float64),
        ))
    return out


def test_load_two_records(tmp_path, rng):
    recs = make_records(rng, 2)
    write_embeddings(tmp_path / "e.bin", recs)
    loaded = load_embeddings(tmp_path / "e.bin")
    assert len(loaded) == 2
    assert all(r.dims == (4, 6, 4) for r in loaded)


def test_round_trip_bitwise_1000(tmp_path, rng):
    recs = make_records(rng, 1000, dims=(5, 7, 3))
    write_embeddings(tmp_path / "e.bin", recs)
    loaded = load_embeddings(tmp_path / "e.bin")
    assert [r.id for r in loaded] == [r.id for r in recs]
    assert [r.label for r in loaded] == [r.label for r in recs]
    for a, b in zip(recs, loaded):
        for name in ("text_fine", "text_coarse", "image_fine", "image_coarse"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()


def test_empty_record_section(tmp_path):
    write_embeddings(tmp_path / "e.bin", [], dims=(4, 6, 4))
    assert load_embeddings(tmp_path / "e.bin") == []


def test_header_layout(tmp_path, rng):
    write_embeddings(tmp_path / "e.bin", make_records(rng, 3))
    buf = (tmp_path / "e.bin").read_bytes()
    assert struct.unpack_from("<4sIIIIQ", buf) == (b"RCMC", 1, 4, 6, 4, 3)


def test_truncated_record_names_index(tmp_path, rng):
    write_embeddings(tmp_path / "e.bin", make_records(rng, 3))
    buf = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "e.bin").write_bytes(buf[:-5])
    with pytest.raises(DataError, match="record 2"):
        load_embeddings(tmp_path / "e.bin")


def test_bad_magic_and_version(tmp_path, rng):
    write_embeddings(tmp_path / "e.bin", make_records(rng, 1))
    buf = bytearray((tmp_path / "e.bin").read_bytes())
    (tmp_path / "m.bin").write_bytes(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(DataError, match="magic"):
        load_embeddings(tmp_path / "m.bin")
    buf[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.bin").write_bytes(bytes(buf))
    with pytest.raises(DataError, match="version"):
        load_embeddings(tmp_path / "v.bin")


def test_non_finite_names_id(tmp_path, rng):
    recs = make_records(rng, 2)
    recs[1].image_fine[2] = np.nan
    write_embeddings(tmp_path / "e.bin", recs)
    with pytest.raises(DataError, match=recs[1].id):
        load_embeddings(tmp_path / "e.bin")


def test_trailing_bytes(tmp_path, rng):
    write_embeddings(tmp_path / "e.bin", make_records(rng, 1))
    with open(tmp_path / "e.bin", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(DataError, match="trailing"):
        load_embeddings(tmp_path / "e.bin")


def test_writer_rejects_mixed_dims(tmp_path, rng):
    recs = make_records(rng, 1) + make_records(rng, 1, dims=(3, 3, 3))
    with pytest.raises(DataError):
        write_embeddings(tmp_path / "e.bin", recs)


# ---------------------------------------------------------------- encode_batch


def test_identity_projection_keeps_text_fine(rng):
    recs = make_records(rng, 3, dims=(4, 6, 4))
    proj = Projections(4, 6, 4, 4, rng)
    proj.text_fine.weight.data = np.eye(4)
    proj.text_fine.bias.data = np.zeros(4)
    batch = encode_batch(recs, proj)
    np.testing.assert_array_equal(batch.T_f_proj.data, batch.T_f.data)


def test_zero_projection_gives_zero_blocks(rng):
    proj = Projections(4, 6, 4, 5, rng)
    for p in proj.parameters():
        p.data = np.zeros_like(p.data)
    batch = encode_batch(make_records(rng, 3), proj)
    for t in (batch.T_f_proj, batch.T_c, batch.I_f_proj, batch.I_c):
        np.testing.assert_array_equal(t.data, np.zeros((3, 5)))


def test_encode_shapes(rng):
    batch = encode_batch(make_records(rng, 3), Projections(4, 6, 4, 8, rng))
    assert batch.size == 3
    assert batch.T_f.shape == (3, 4) and batch.I_f.shape == (3, 6)
    for t in (batch.T_f_proj, batch.T_c, batch.I_f_proj, batch.I_c):
        assert t.shape == (3, 8)


def test_encode_dim_mismatch(rng):
    recs = make_records(rng, 2) + make_records(rng, 1, dims=(5, 6, 4))
    with pytest.raises(DimensionError):
        encode_batch(recs, Projections(4, 6, 4, 8, rng))
    with pytest.raises(DimensionError):
        encode_batch(make_records(rng, 2), Projections(5, 6, 4, 8, rng))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_encode_permutation_equivariant(seed, size):
    rng = np.random.default_rng(seed)
    data = RecordArrays.from_records(make_records(rng, size))
    proj = Projections(4, 6, 4, 5, rng)
    perm = rng.permutation(size)
    a = encode_batch(data, proj)
    b = encode_batch(data.subset(perm), proj)
    np.testing.assert_array_equal(b.labels, a.labels[perm])
    for name in ("T_f", "I_f", "T_f_proj", "T_c", "I_f_proj", "I_c"):
        np.testing.assert_allclose(getattr(b, name).data, getattr(a, name).data[perm], rtol=1e-14)


def test_encode_accepts_tensor_fields(rng):
    data = RecordArrays.from_records(make_records(rng, 2))
    data.text_fine = Tensor(data.text_fine)
    batch = encode_batch(data, Projections(4, 6, 4, 3, rng))
    assert batch.T_f is data.text_fine
