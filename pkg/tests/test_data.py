import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from protoform import data
from protoform.data import EMB_MAGIC, EmbeddingDataset, SyntheticSpec, generate, load_embeddings, save_embeddings
from protoform.errors import ConfigurationError, EmptyDatasetError, FormatError


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 12))
    c = draw(st.integers(1, 5))
    zw, zh, d = draw(st.integers(1, 3)), draw(st.integers(1, 3)), draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    feats = (rng.normal(size=(n, zw, zh, d)) * 10 ** rng.uniform(-30, 30, size=(n, zw, zh, d)))
    return EmbeddingDataset(feats.astype(np.float32), rng.integers(0, c, n), c)


@given(datasets())
def test_round_trip(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("emb") / "d.emb"
    save_embeddings(ds, path)
    back = load_embeddings(path)
    assert back.equals(ds)


def test_layout_is_bit_exact(tmp_path):
    ds = EmbeddingDataset(np.arange(12, dtype=np.float32).reshape(2, 1, 2, 3), [1, 0], 2)
    save_embeddings(ds, tmp_path / "d.emb")
    raw = (tmp_path / "d.emb").read_bytes()
    expect = EMB_MAGIC + struct.pack("<5I", 2, 2, 1, 2, 3)
    expect += struct.pack("<I6f", 1, *range(6)) + struct.pack("<I6f", 0, *range(6, 12))
    assert raw == expect
    assert data.read_header(tmp_path / "d.emb") == (2, 2, 1, 2, 3)


def test_save_truncates_existing(tmp_path):
    path = tmp_path / "d.emb"
    path.write_bytes(b"\xff" * 10_000)
    ds = EmbeddingDataset(np.ones((1, 1, 1, 2)), [0], 1)
    save_embeddings(ds, path)
    assert load_embeddings(path).equals(ds)


def _valid(tmp_path):
    ds = EmbeddingDataset(np.ones((3, 1, 1, 2)), [0, 1, 1], 2)
    save_embeddings(ds, tmp_path / "ok.emb")
    return (tmp_path / "ok.emb").read_bytes()


def test_bad_magic(tmp_path):
    raw = _valid(tmp_path)
    (tmp_path / "x").write_bytes(b"PROTOEMB2" + raw[9:])
    with pytest.raises(FormatError, match="magic") as err:
        load_embeddings(tmp_path / "x")
    assert err.value.offset == 0


def test_truncated(tmp_path):
    raw = _valid(tmp_path)
    rec = 4 + 2 * 4
    (tmp_path / "x").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated") as err:
        load_embeddings(tmp_path / "x")
    assert err.value.offset == 29 + 2 * rec
    (tmp_path / "y").write_bytes(raw[:20])
    with pytest.raises(FormatError, match="header"):
        load_embeddings(tmp_path / "y")


def test_label_out_of_range(tmp_path):
    raw = bytearray(_valid(tmp_path))
    rec = 12
    struct.pack_into("<I", raw, 29 + rec, 7)
    (tmp_path / "x").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="label 7") as err:
        load_embeddings(tmp_path / "x")
    assert err.value.offset == 29 + rec


def test_trailing_bytes_and_nonfinite(tmp_path):
    raw = _valid(tmp_path)
    (tmp_path / "x").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_embeddings(tmp_path / "x")
    bad = bytearray(raw)
    struct.pack_into("<f", bad, 29 + 4, float("nan"))
    (tmp_path / "y").write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="non-finite"):
        load_embeddings(tmp_path / "y")


def test_empty_file(tmp_path):
    (tmp_path / "x").write_bytes(EMB_MAGIC + struct.pack("<5I", 0, 3, 1, 1, 4))
    with pytest.raises(EmptyDatasetError):
        load_embeddings(tmp_path / "x")


def test_generate_deterministic():
    spec = SyntheticSpec(n_classes=4, per_class=10, d_in=5, zeta=(2, 1), seed=9)
    a, b = generate(spec), generate(spec)
    assert a[0].equals(b[0]) and a[1].equals(b[1])
    c = generate(SyntheticSpec(n_classes=4, per_class=10, d_in=5, zeta=(2, 1), seed=10))
    assert not a[0].equals(c[0])
    assert a[0].zeta == (2, 1)


@pytest.mark.parametrize("kind", ["hyperspherical_vmf", "euclidean_blobs"])
@pytest.mark.parametrize("per_class", [1, 2, 7, 10, 23])
def test_split_disjoint_and_stratified(kind, per_class):
    spec = SyntheticSpec(kind=kind, n_classes=5, per_class=per_class, d_in=4, seed=per_class)
    tr, te = generate(spec)
    assert len(tr) + len(te) == 5 * per_class
    rows = {r.tobytes() for r in tr.features.reshape(len(tr), 4)}
    assert not rows & {r.tobytes() for r in te.features.reshape(len(te), 4)}
    for c in range(5):
        n_te = int(np.sum(te.labels == c))
        assert abs(n_te - 0.2 * per_class) <= 1
        assert np.sum(tr.labels == c) >= 1


def test_concentrated_classes_collapse_to_points():
    tr, te = generate(SyntheticSpec(n_classes=2, per_class=20, d_in=3, kappa_gen=1e14,
                                    norm_range=(1.0, 1.0), seed=1))
    for c in range(2):
        pts = tr.features[tr.labels == c].reshape(-1, 3)
        assert np.ptp(pts, axis=0).max() < 1e-6
    mean0 = tr.features[tr.labels == 0].reshape(-1, 3).mean(0)
    mean1 = tr.features[tr.labels == 1].reshape(-1, 3).mean(0)
    assert np.linalg.norm(mean0 - mean1) > 1.0


def test_orthogonal_anchor_class_means():
    tr, _ = generate(SyntheticSpec(n_classes=5, per_class=100, d_in=16, seed=2))
    x = tr.features.reshape(len(tr), -1)
    means = np.stack([x[tr.labels == c].mean(0) for c in range(5)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    cos = means @ means.T
    assert np.max(cos[~np.eye(5, dtype=bool)]) < 0.5


def test_norm_independent_of_label():
    tr, te = generate(SyntheticSpec(n_classes=10, per_class=100, d_in=8, seed=3))
    feats = np.concatenate([tr.features, te.features]).reshape(1000, -1)
    labels = np.concatenate([tr.labels, te.labels])
    norms = np.linalg.norm(feats, axis=1)
    assert norms.min() >= 0.5 - 1e-6 and norms.max() <= 2.0 + 1e-6
    assert abs(stats.spearmanr(norms, labels)[0]) < 0.1
    assert stats.kstest((norms - 0.5) / 1.5, "uniform").pvalue > 1e-3


def test_spec_validation():
    for bad in (dict(n_classes=1), dict(per_class=0), dict(kind="rings"), dict(kappa_gen=0),
                dict(norm_range=(2.0, 1.0)), dict(test_fraction=1.0)):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(**bad)


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        EmbeddingDataset(np.zeros((2, 1, 1, 3)), [0, 2], 2)
    with pytest.raises(ConfigurationError):
        EmbeddingDataset(np.full((1, 1, 1, 3), np.inf), [0], 2)


def test_stats_csv(tmp_path):
    tr, _ = generate(SyntheticSpec(n_classes=3, per_class=10, d_in=4))
    data.write_stats_csv(tr, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "class,count,mean_norm,std_norm" and len(lines) == 4
