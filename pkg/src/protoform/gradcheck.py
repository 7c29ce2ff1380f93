"""Central finite-difference checks of the analytic similarity gradients."""

from dataclasses import dataclass

import numpy as np

from . import formulations as F

FD_STEP = 1e-5
TOLERANCE = 1e-4


def relative_error(analytic, numeric, floor=1e-8):
    """max |a - n| / max(max |a|, max |n|, floor)."""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def central_difference(fn, x, step=FD_STEP):
    """Numerical gradient of scalar ``fn`` at array ``x`` (not modified)."""
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * step)
    return grad


def random_point(tag, rng, dim=5):
    """A random (kernel, z, params) triple at which the tag's score is smooth."""
    kern = F.make_formulation(tag)
    params = kern.init_params(rng, 1, dim)
    z = rng.standard_normal(dim)
    if tag in ("euclidean", "gaussian"):
        z = rng.uniform(0, 1, dim)
        if tag == "gaussian":
            params["log_var"] = rng.uniform(-1.5, 0.5, (1, dim))
    elif tag in ("cosine", "sdot"):
        params["p"] = rng.standard_normal((1, dim))
    elif isinstance(kern, (F.HyperPG, F.MixtureHyperPG)):
        shape = params["mu"].shape
        params["anchor"] = rng.standard_normal(params["anchor"].shape)
        params["mu"] = rng.uniform(-0.5, 1.0, shape)
        params["raw_sigma"] = F.raw_sigma_for(rng.uniform(0.15, 0.8, shape))
        if tag == "mixture":
            params["logits_pi"] = rng.standard_normal(shape)
    elif tag == "vmf":
        params["anchor"] = rng.standard_normal((1, dim))
        params["log_kappa"] = np.log(rng.uniform(0.5, 5.0, 1))
    elif tag == "fb":
        params["log_kappa"] = np.log(rng.uniform(2.0, 6.0, 1))
        beta = rng.uniform(-0.3, 0.8, (1, dim - 1))
        params["beta"] = beta - (beta.sum() - 1.0) / (dim - 1)
        kern.project(params)
    return kern, z, params


def point_error(kern, z, params, step=FD_STEP):
    """Relative error of the analytic gradient at one point (z and all params)."""
    cache = kern.forward(z[None], params)[1]
    dZ, grads = kern.backward(cache, np.ones((1, 1)))

    def score_z(zz):
        return kern.forward(zz[None], params)[0][0, 0]

    analytic = [dZ[0]]
    numeric = [central_difference(score_z, z, step)]
    for name in kern.param_names:
        def score_p(value, name=name):
            trial = dict(params)
            trial[name] = value
            return kern.forward(z[None], trial)[0][0, 0]
        analytic.append(grads[name])
        numeric.append(central_difference(score_p, params[name], step))
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))


@dataclass
class GradcheckRow:
    tag: str
    points: int
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def check_formulation(tag, n_points=100, seed=0, dim=5, step=FD_STEP):
    rng = np.random.default_rng([seed, F.FORMULATION_TAGS.index(tag)])
    worst = 0.0
    for _ in range(n_points):
        worst = max(worst, point_error(*random_point(tag, rng, dim), step=step))
    return GradcheckRow(tag, n_points, worst)


def check_all(tags=F.FORMULATION_TAGS, n_points=100, seed=0, dim=5, step=FD_STEP):
    return [check_formulation(tag, n_points, seed, dim, step) for tag in tags]
