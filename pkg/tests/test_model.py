import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import expit

from protoform.errors import ConfigurationError, ContractViolation, FormatError, NumericalFailure
from protoform.formulations import FORMULATION_TAGS
from protoform.gradcheck import central_difference, relative_error
from protoform.losses import LossWeights
from protoform.model import CHECKPOINT_MAGIC, Model, ModelConfig, load_checkpoint, make_model, save_checkpoint
from protoform.training import loss_and_grads

HYPERSPHERICAL = ["cosine", "hyperpg", "hyperpg-cauchy", "hyperpg-trunc-gauss", "hyperpg-trunc-cauchy",
                  "vmf", "fb", "mixture"]


def test_zero_neck_gives_half():
    m = make_model("cosine", 2, q=1, dim=3, d_in=4)
    for k in ("neck.W1", "neck.b1", "neck.W2", "neck.b2"):
        m.params[k][...] = 0
    latent = m.neck_forward(np.random.default_rng(0).normal(size=(2, 3, 2, 4)))[0]
    assert latent.shape == (2, 3, 2, 3)
    assert np.all(latent == 0.5)


def test_neck_hand_example():
    m = make_model("cosine", 2, q=1, dim=2, d_in=2, d_hidden=2)
    m.params["neck.W1"][...] = [[1.0, -1.0], [2.0, 0.5]]
    m.params["neck.b1"][...] = [0.0, 0.25]
    m.params["neck.W2"][...] = [[1.0, 0.0], [-2.0, 3.0]]
    m.params["neck.b2"][...] = [0.1, -0.2]
    x = np.array([0.5, -0.25])
    # hidden pre-activation: (0.5 - 0.5, -0.5 - 0.125 + 0.25) = (0, -0.375) -> relu (0, 0)
    out = m.neck_forward(x.reshape(1, 1, 1, 2))[0].ravel()
    np.testing.assert_allclose(out, expit([0.1, -0.2]), rtol=1e-15)
    x = np.array([1.0, 1.0])
    # pre = (3, -0.25) -> relu (3, 0) -> (3 + 0.1, 0 - 0.2)
    out = m.neck_forward(x.reshape(1, 1, 1, 2))[0].ravel()
    np.testing.assert_allclose(out, expit([3.1, -0.2]), rtol=1e-15)


def test_one_cell_grid_is_a_perceptron():
    m = make_model("euclidean", 3, q=2, dim=5, d_in=6)
    x = np.random.default_rng(1).normal(size=(4, 6))
    p = m.params
    ref = expit(np.maximum(x @ p["neck.W1"] + p["neck.b1"], 0) @ p["neck.W2"] + p["neck.b2"])
    np.testing.assert_allclose(m.neck_forward(x.reshape(4, 1, 1, 6))[0].reshape(4, 5), ref, rtol=1e-14)


@given(st.floats(-1e3, 1e3), st.integers(0, 2 ** 31))
def test_neck_output_in_open_unit_interval(scale, seed):
    m = make_model("cosine", 2, q=1, dim=4, d_in=3, seed=seed % 1000)
    x = np.random.default_rng(seed).normal(size=(2, 2, 2, 3)) * scale
    out = m.neck_forward(x)[0]
    assert np.all((out >= 0) & (out <= 1)) and np.all(np.isfinite(out))


def test_neck_dimension_mismatch():
    m = make_model("cosine", 2, q=1, dim=4, d_in=3)
    with pytest.raises(ContractViolation):
        m.neck_forward(np.zeros((1, 1, 1, 5)))


def test_pool_single_cell_equals_similarity():
    m = make_model("vmf", 2, q=2, dim=4, d_in=3)
    x = np.random.default_rng(2).normal(size=(5, 1, 1, 3))
    fwd = m.forward(x)
    np.testing.assert_array_equal(fwd.pooled, fwd.sim_map.reshape(5, -1))


def test_pool_exact_match_peak():
    m = make_model("euclidean", 2, q=1, dim=3, d_in=2)
    latent = np.random.default_rng(3).uniform(size=(1, 2, 2, 3))
    m.params["proto.p"][1] = latent[0, 1, 0]
    sim, _ = m.prototype_forward(latent)
    assert sim[0, 1, 0, 1] == pytest.approx(np.log(1e4), rel=1e-14)
    assert np.argmax(sim[0, ..., 1]) == 2


def test_pool_hand_set_cosine_scores():
    # four unit cells with known cosines to the anchor e1
    m = make_model("cosine", 2, q=1, dim=2, d_in=2)
    m.params["proto.p"][0] = [1.0, 0.0]
    cos = np.array([0.1, 0.9, -0.2, 0.3])
    cells = np.stack([cos, np.sqrt(1 - cos ** 2)], axis=1).reshape(1, 2, 2, 2)
    sim, _ = m.prototype_forward(cells)
    np.testing.assert_allclose(np.sort(sim[0, ..., 0].ravel()), np.sort(cos), atol=1e-15)
    assert sim[0, ..., 0].max() == pytest.approx(0.9)


@pytest.mark.parametrize("tag", FORMULATION_TAGS)
def test_pool_invariant_to_spatial_permutation(tag):
    rng = np.random.default_rng(4)
    m = make_model(tag, 2, q=2, dim=4, d_in=3)
    x = rng.normal(size=(3, 3, 2, 3))
    perm = rng.permutation(6)
    xp = x.reshape(3, 6, 3)[:, perm].reshape(3, 3, 2, 3)
    np.testing.assert_array_equal(m.forward(x).pooled, m.forward(xp).pooled)


@pytest.mark.parametrize("tag", ["cosine", "hyperpg-trunc-gauss", "vmf"])
def test_hyperspherical_scores_invariant_to_latent_scaling(tag):
    m = make_model(tag, 3, q=2, dim=4, d_in=3)
    latent = m.neck_forward(np.random.default_rng(5).normal(size=(6, 2, 2, 3)))[0]
    s1, _ = m.prototype_forward(latent)
    s2, _ = m.prototype_forward(latent * 7.5)
    np.testing.assert_allclose(s1, s2, rtol=1e-10, atol=1e-12)
    head = m.params["head.W"]
    np.testing.assert_array_equal(np.argmax(s1.max(axis=(1, 2)) @ head.T, 1),
                                  np.argmax(s2.max(axis=(1, 2)) @ head.T, 1))


def test_head_examples():
    m = make_model("cosine", 2, q=1, dim=2, d_in=2)
    m.params["head.W"][...] = 0
    assert np.all(m.forward(np.ones((2, 1, 1, 2))).logits == 0)
    m = make_model("cosine", 3, q=2, dim=2, d_in=2)
    for p in range(6):
        onehot = np.eye(6)[p]
        assert np.argmax(m.params["head.W"] @ onehot + m.params["head.b"]) == p // 2
    m = make_model("cosine", 2, q=1, dim=2, d_in=2)
    m.params["head.W"][...] = [[2.0, -1.0], [0.5, 3.0]]
    m.params["head.b"][...] = [0.1, -0.1]
    scores = np.array([0.4, 0.2])
    np.testing.assert_allclose(m.params["head.W"] @ scores + m.params["head.b"], [0.7, 0.7])


def test_head_init_convention():
    m = make_model("cosine", 3, q=2, dim=2, d_in=2)
    W = m.params["head.W"]
    assert W.shape == (3, 6)
    assert np.all(W[np.arange(3).repeat(2), np.arange(6)] == 1.0)
    assert np.sum(W == -0.5) == 12


def _tie_free(model, x, labels):
    fwd = model.forward(x)
    flat = np.sort(fwd.sim_map.reshape(len(x), -1, fwd.sim_map.shape[-1]), axis=1)
    pool_gap = (flat[:, -1] - flat[:, -2]).min() if flat.shape[1] > 1 else np.inf
    return pool_gap > 1e-4 and np.abs(fwd.pre1).min() > 1e-4


def _tiny(tag, seed):
    rng = np.random.default_rng(seed)
    m = make_model(tag, 2, q=1, dim=3, d_in=4, d_hidden=3, seed=seed)
    x = rng.normal(size=(3, 2, 2, 4))
    y = np.array([0, 1, 1])
    return m, x, y


@pytest.mark.parametrize("tag", FORMULATION_TAGS)
def test_end_to_end_gradients(tag):
    for seed in range(20):
        m, x, y = _tiny(tag, seed)
        if _tie_free(m, x, y):
            break
    else:
        pytest.fail("no tie-free instance found")
    _, grads = loss_and_grads(m, x, y, LossWeights())

    def loss_at(name):
        def f(value):
            saved = m.params[name]
            m.params[name] = value
            try:
                return loss_and_grads(m, x, y, LossWeights())[0][3]
            finally:
                m.params[name] = saved
        return f

    analytic = np.concatenate([grads[n].ravel() for n in m.params])
    numeric = np.concatenate([central_difference(loss_at(n), m.params[n]).ravel() for n in m.params])
    assert relative_error(analytic, numeric) < 1e-4
    for n in m.params:
        num = central_difference(loss_at(n), m.params[n])
        assert relative_error(grads[n], num, floor=1e-6) < 1e-4, n


@pytest.mark.parametrize("tag", ["euclidean", "cosine"])
def test_patch_prototypes(tag):
    m = make_model(tag, 2, q=1, dim=3, d_in=4, patch=(2, 2), seed=1)
    assert m.params["proto.p"].shape == (2, 4, 3)
    x = np.random.default_rng(8).normal(size=(2, 3, 3, 4))
    fwd = m.forward(x)
    assert fwd.sim_map.shape == (2, 2, 2, 2)
    # oracle: sum of per-cell similarities over each 2x2 window
    lat = fwd.latent
    kern = m.kernel
    for b in range(2):
        for i in range(2):
            for j in range(2):
                total = 0.0
                for k, (a, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
                    total += kern.forward(lat[b, i + a, j + c][None], {"p": m.params["proto.p"][:, k]})[0][0]
                np.testing.assert_allclose(fwd.sim_map[b, i, j], total, rtol=1e-12)
    _, grads = loss_and_grads(m, x, np.array([0, 1]))

    def f(value):
        saved = m.params["proto.p"]
        m.params["proto.p"] = value
        try:
            return loss_and_grads(m, x, np.array([0, 1]))[0][3]
        finally:
            m.params["proto.p"] = saved
    assert relative_error(grads["proto.p"], central_difference(f, m.params["proto.p"])) < 1e-4


def test_patch_rejected_for_probabilistic():
    with pytest.raises(ConfigurationError):
        make_model("hyperpg", 2, patch=(2, 1), dim=3, d_in=2)


def test_frozen_neck_single_prototype_cluster_gradient():
    m = make_model("cosine", 2, q=1, dim=3, d_in=2)
    x = np.random.default_rng(9).normal(size=(1, 2, 2, 2))
    fwd = m.forward(x)
    d_pooled = np.zeros((1, 2))
    d_pooled[0, 0] = -1.0                     # d(cluster loss)/d(pooled own score)
    grads = m.backward(fwd, np.zeros((1, 2)), d_pooled, frozen=("neck", "head"))
    assert set(grads) == {"proto.p"}
    best = fwd.latent.reshape(-1, 3)[fwd.argmax[0, 0]]
    kern = m.kernel
    _, cache = kern.forward(best[None], {"p": m.params["proto.p"][:1]})
    ds = kern.backward(cache, np.ones((1, 1)))[1]["p"][0]
    np.testing.assert_allclose(grads["proto.p"][0], -ds, rtol=1e-12)
    assert np.all(grads["proto.p"][1] == 0)


def test_zero_head_cuts_cross_entropy_path():
    m = make_model("hyperpg", 2, q=2, dim=3, d_in=2)
    m.params["head.W"][...] = 0
    x = np.random.default_rng(10).normal(size=(4, 1, 1, 2))
    fwd = m.forward(x)
    dlogits = np.random.default_rng(11).normal(size=(4, 2))
    grads = m.backward(fwd, dlogits)
    for name in m.params:
        if name.startswith(("proto", "neck")):
            assert np.all(grads[name] == 0), name


def test_nan_gradient_reports_path():
    m = make_model("cosine", 2, q=1, dim=3, d_in=2)
    fwd = m.forward(np.ones((1, 1, 1, 2)))
    with pytest.raises(NumericalFailure) as err:
        m.backward(fwd, np.array([[np.nan, 0.0]]))
    assert err.value.path == "head.W"


@pytest.mark.parametrize("tag", FORMULATION_TAGS)
def test_checkpoint_round_trip(tmp_path, tag):
    m = make_model(tag, 3, q=2, dim=4, d_in=5, seed=3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, zeta=(2, 3))
    back, zeta = load_checkpoint(path)
    assert zeta == (2, 3)
    for f in ("formulation", "n_classes", "q", "dim", "d_in", "d_hidden", "patch"):
        assert getattr(back.config, f) == getattr(m.config, f)
    # the file stores resolved kernel options, defaults included
    assert back.kernel.options() == m.kernel.options()
    assert list(back.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k], m.params[k])
    assert back.checksum() == m.checksum()


def test_checkpoint_keeps_options_and_patch(tmp_path):
    m = make_model("euclidean", 2, q=1, dim=3, d_in=2, patch=(2, 1), eps=1e-3)
    save_checkpoint(m, tmp_path / "m.ckpt")
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config.patch == (2, 1) and back.kernel.eps == 1e-3


def test_checkpoint_errors(tmp_path):
    m = make_model("vmf", 2, q=1, dim=3, d_in=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw.startswith(CHECKPOINT_MAGIC)
    (tmp_path / "bad").write_bytes(b"X" + raw[1:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "long").write_bytes(raw + b"\0")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "long")


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig("cosine", 2, q=0)
    assert ModelConfig("cosine", 2, d_in=10).d_hidden == 5
