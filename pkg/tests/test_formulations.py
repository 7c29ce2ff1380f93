import numpy as np
import pytest

from protoform import formulations as F
from protoform.errors import ConfigurationError, InvalidPrototypeError
from protoform.gradcheck import TOLERANCE, check_formulation, relative_error


@pytest.mark.parametrize("tag", F.FORMULATION_TAGS)
def test_gradcheck_every_formulation(tag):
    row = check_formulation(tag, n_points=100, seed=7)
    assert row.max_rel_error < TOLERANCE, row


@pytest.mark.parametrize("tag", F.FORMULATION_TAGS)
def test_batched_backward_is_sum_of_rows(tag):
    rng = np.random.default_rng(3)
    kern = F.make_formulation(tag)
    params = kern.init_params(rng, 4, 6)
    Z = rng.uniform(0.05, 1, (5, 6))
    S, cache = kern.forward(Z, params)
    assert S.shape == (5, 4) and np.all(np.isfinite(S))
    G = rng.normal(size=S.shape)
    dZ, grads = kern.backward(cache, G)
    for i in range(5):
        Si, ci = kern.forward(Z[i:i + 1], params)
        dzi, gi = kern.backward(ci, G[i:i + 1])
        np.testing.assert_allclose(dZ[i], dzi[0], rtol=1e-12, atol=1e-14)
    total = {n: sum(kern.backward(kern.forward(Z[i:i + 1], params)[1], G[i:i + 1])[1][n]
                    for i in range(5)) for n in kern.param_names}
    for n in kern.param_names:
        np.testing.assert_allclose(grads[n], total[n], rtol=1e-10, atol=1e-12)


def test_unknown_tag():
    with pytest.raises(ConfigurationError, match="hyperpg-trunc-gauss"):
        F.make_formulation("hyperbolic")


def test_tag_family_bijection():
    fams = [F.make_formulation(t).family for t in F.FORMULATION_TAGS if t.startswith("hyperpg")]
    assert len(set(fams)) == 4
    for t in F.FORMULATION_TAGS:
        assert F.make_formulation(t).tag == t


def test_hyperpg_init_values():
    kern = F.make_formulation("hyperpg-trunc-gauss")
    p = kern.init_params(np.random.default_rng(0), 20, 8)
    assert np.all(p["mu"] == 0.5)
    np.testing.assert_allclose(kern.sigma(p["raw_sigma"]), 0.3, rtol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(p["anchor"], axis=1), 1.0, rtol=1e-12)


def test_softplus_inverse():
    y = np.array([1e-6, 0.3, 5.0, 50.0, 800.0])
    np.testing.assert_allclose(F.softplus(F.inverse_softplus(y)), y, rtol=1e-12)
    assert np.isfinite(F.softplus(np.array([1000.0, -1000.0]))).all()


def test_fb_projection_restores_constraints():
    rng = np.random.default_rng(9)
    kern = F.make_formulation("fb")
    p = kern.init_params(rng, 3, 5)
    p["axes"] += rng.normal(scale=0.05, size=p["axes"].shape)
    p["beta"] = rng.normal(scale=3.0, size=p["beta"].shape)
    p["log_kappa"][:] = np.log(0.5)
    with pytest.raises(InvalidPrototypeError):
        kern.validate(p)
    kern.project(p)
    kern.validate(p)
    for A in p["axes"]:
        np.testing.assert_allclose(A @ A.T, np.eye(5), atol=1e-12)
    np.testing.assert_allclose(p["beta"].sum(axis=1), 1.0, rtol=1e-12)
    assert np.all(2 * np.abs(p["beta"]) < np.exp(p["log_kappa"])[:, None])


def test_fb_projection_is_idempotent_on_valid_params():
    kern = F.make_formulation("fb")
    p = kern.init_params(np.random.default_rng(2), 2, 4)
    before = {k: v.copy() for k, v in p.items()}
    kern.project(p)
    for k in p:
        np.testing.assert_allclose(p[k], before[k], atol=1e-13)


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-9])) < 1e-8
