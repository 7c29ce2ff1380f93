"""Prototype similarity measures on single latent vectors.

The functions here are the readable, per-vector definitions. Batched
training code goes through :mod:`protoform.formulations`; the test-suite
checks that both routes agree.
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from . import formulations as F
from .densities import PdfFamily, gaussian_cdf, pdf_eval
from .errors import ContractViolation, DomainError, InvalidPrototypeError

__all__ = [
    "PdfFamily", "gaussian_cdf", "pdf_eval",
    "l2_similarity", "cosine_similarity", "scaled_dot_similarity",
    "gaussian_log_similarity", "hyperpg_similarity", "vmf_log_similarity",
    "fb_log_similarity", "mixture_similarity", "similarity", "similarity_gradient",
    "EuclideanPrototype", "CosinePrototype", "ScaledDotPrototype", "GaussianPrototype",
    "HyperPGPrototype", "VMFPrototype", "FisherBinghamPrototype", "MixturePrototype",
]


def _vec(x, name="vector"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractViolation(f"{name} must be a non-empty 1-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation(f"{name} has non-finite entries")
    return x


def _pair(z, p):
    z = _vec(z, "z")
    p = _vec(p, "prototype")
    if z.shape != p.shape:
        raise ContractViolation(f"dimension mismatch: {z.shape[0]} vs {p.shape[0]}")
    return z, p


def l2_similarity(z, p, eps=F.DEFAULT_EPS):
    """log((d + 1) / (d + eps)) with d the squared L2 distance."""
    if not eps > 0:
        raise ContractViolation("eps must be positive")
    z, p = _pair(z, p)
    d = float(np.sum((z - p) ** 2))
    return float(np.log1p(d) - np.log(d + eps))


def cosine_similarity(z, p):
    z, p = _pair(z, p)
    nz, np_ = np.linalg.norm(z), np.linalg.norm(p)
    if nz == 0.0 or np_ == 0.0:
        raise DomainError("cosine similarity undefined for zero-norm input")
    return float(np.clip(z @ p / (nz * np_), -1.0, 1.0))


def scaled_dot_similarity(z, p):
    z, p = _pair(z, p)
    return float(z @ p / np.sqrt(z.size))


@dataclass(frozen=True, eq=False)
class EuclideanPrototype:
    p: np.ndarray
    eps: float = F.DEFAULT_EPS
    tag = "euclidean"

    def kernel(self):
        return F.Euclidean(self.eps), {"p": _vec(self.p)[None]}


@dataclass(frozen=True, eq=False)
class CosinePrototype:
    p: np.ndarray
    tag = "cosine"

    def __post_init__(self):
        if np.linalg.norm(self.p) == 0:
            raise InvalidPrototypeError("cosine prototype needs a nonzero vector")

    def kernel(self):
        return F.Cosine(), {"p": _vec(self.p)[None]}


@dataclass(frozen=True, eq=False)
class ScaledDotPrototype:
    p: np.ndarray
    tag = "sdot"

    def kernel(self):
        return F.ScaledDot(), {"p": _vec(self.p)[None]}


@dataclass(frozen=True, eq=False)
class GaussianPrototype:
    mean: np.ndarray
    log_var: np.ndarray
    tag = "gaussian"

    def kernel(self):
        return F.Gaussian(), {"mean": _vec(self.mean)[None], "log_var": _vec(self.log_var)[None]}


@dataclass(frozen=True, eq=False)
class HyperPGPrototype:
    anchor: np.ndarray
    mu: float
    raw_sigma: float
    family: PdfFamily = PdfFamily.TRUNC_GAUSSIAN
    sigma_floor: float = F.SIGMA_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "family", PdfFamily(self.family))
        if np.linalg.norm(self.anchor) == 0:
            raise InvalidPrototypeError("HyperPG anchor must be nonzero")

    @classmethod
    def from_sigma(cls, anchor, mu, sigma, family=PdfFamily.TRUNC_GAUSSIAN,
                   sigma_floor=F.SIGMA_FLOOR):
        if not sigma > sigma_floor:
            raise InvalidPrototypeError(f"sigma must exceed the floor {sigma_floor}")
        return cls(np.asarray(anchor, dtype=np.float64), float(mu),
                   float(F.raw_sigma_for(sigma, sigma_floor)), family, sigma_floor)

    @property
    def sigma(self):
        return float(F.softplus(self.raw_sigma) + self.sigma_floor)

    @property
    def tag(self):
        return F.HyperPG._tags[self.family]

    def kernel(self):
        return F.HyperPG(self.family, self.sigma_floor), {
            "anchor": _vec(self.anchor)[None],
            "mu": np.array([self.mu], dtype=np.float64),
            "raw_sigma": np.array([self.raw_sigma], dtype=np.float64),
        }


@dataclass(frozen=True, eq=False)
class VMFPrototype:
    anchor: np.ndarray
    log_kappa: float
    tag = "vmf"

    @classmethod
    def from_kappa(cls, anchor, kappa):
        return cls(np.asarray(anchor, dtype=np.float64), float(np.log(kappa)))

    @property
    def kappa(self):
        return float(np.exp(self.log_kappa))

    def kernel(self):
        return F.VonMisesFisher(), {"anchor": _vec(self.anchor)[None],
                                    "log_kappa": np.array([self.log_kappa], dtype=np.float64)}


@dataclass(frozen=True, eq=False)
class FisherBinghamPrototype:
    axes: np.ndarray
    log_kappa: float
    beta: np.ndarray
    tag = "fb"

    def __post_init__(self):
        axes = np.asarray(self.axes, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if axes.ndim != 2 or axes.shape[0] != axes.shape[1]:
            raise InvalidPrototypeError("axes must be a square matrix")
        if beta.shape != (axes.shape[0] - 1,):
            raise InvalidPrototypeError(f"beta must have length {axes.shape[0] - 1}")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "beta", beta)
        F.FisherBingham().validate(self._params())

    @classmethod
    def from_kappa(cls, axes, kappa, beta):
        return cls(axes, float(np.log(kappa)), beta)

    @property
    def kappa(self):
        return float(np.exp(self.log_kappa))

    def _params(self):
        return {"axes": self.axes[None], "log_kappa": np.array([self.log_kappa]),
                "beta": self.beta[None]}

    def kernel(self):
        return F.FisherBingham(), self._params()


@dataclass(frozen=True, eq=False)
class MixturePrototype:
    components: Tuple[HyperPGPrototype, ...]
    logits_pi: np.ndarray = field(default=None)
    tag = "mixture"

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise InvalidPrototypeError("mixture needs at least one component")
        fams = {c.family for c in comps}
        floors = {c.sigma_floor for c in comps}
        if len(fams) != 1 or len(floors) != 1:
            raise InvalidPrototypeError("mixture components must share family and sigma floor")
        logits = np.zeros(len(comps)) if self.logits_pi is None else _vec(self.logits_pi, "logits_pi")
        if logits.shape != (len(comps),):
            raise InvalidPrototypeError("one mixture logit per component")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "logits_pi", logits)

    @property
    def weights(self):
        e = np.exp(self.logits_pi - self.logits_pi.max())
        return e / e.sum()

    def kernel(self):
        c0 = self.components[0]
        kern = F.MixtureHyperPG(len(self.components), c0.family, c0.sigma_floor)
        return kern, {
            "anchor": np.stack([_vec(c.anchor) for c in self.components])[None],
            "mu": np.array([[c.mu for c in self.components]]),
            "raw_sigma": np.array([[c.raw_sigma for c in self.components]]),
            "logits_pi": self.logits_pi[None],
        }


def gaussian_log_similarity(z, p: GaussianPrototype):
    z, mean = _pair(z, p.mean)
    log_var = _vec(p.log_var, "log_var")
    if log_var.shape != z.shape:
        raise ContractViolation("log_var dimension mismatch")
    return float(-0.5 * np.sum(np.log(2 * np.pi) + log_var + (z - mean) ** 2 / np.exp(log_var)))


def hyperpg_similarity(z, p: HyperPGPrototype):
    return float(pdf_eval(p.family, cosine_similarity(z, p.anchor), p.mu, p.sigma))


def vmf_log_similarity(z, p: VMFPrototype):
    return p.kappa * cosine_similarity(z, p.anchor)


def fb_log_similarity(z, p: FisherBinghamPrototype):
    """kappa * <a_1, v> + sum_j beta_j <a_j, v>^2 with v = z / |z|."""
    z = _vec(z, "z")
    if z.shape[0] != p.axes.shape[0]:
        raise ContractViolation("dimension mismatch")
    nz = np.linalg.norm(z)
    if nz == 0:
        raise DomainError("Fisher-Bingham similarity undefined for zero-norm input")
    proj = p.axes @ (z / nz)
    return float(p.kappa * proj[0] + np.sum(p.beta * proj[1:] ** 2))


def mixture_similarity(z, p: MixturePrototype):
    values = np.array([hyperpg_similarity(z, c) for c in p.components])
    return float(p.weights @ values)


_SCALAR = {
    EuclideanPrototype: lambda z, p: l2_similarity(z, p.p, p.eps),
    CosinePrototype: lambda z, p: cosine_similarity(z, p.p),
    ScaledDotPrototype: lambda z, p: scaled_dot_similarity(z, p.p),
    GaussianPrototype: gaussian_log_similarity,
    HyperPGPrototype: hyperpg_similarity,
    VMFPrototype: vmf_log_similarity,
    FisherBinghamPrototype: fb_log_similarity,
    MixturePrototype: mixture_similarity,
}


def similarity(z, p):
    """Similarity score of ``z`` under any prototype type."""
    try:
        fn = _SCALAR[type(p)]
    except KeyError:
        raise ContractViolation(f"not a prototype: {type(p).__name__}") from None
    return fn(z, p)


def similarity_gradient(p, z):
    """Analytic gradient of ``similarity(z, p)``.

    Returns
    -------
    grad_z : ndarray, shape (D,)
    grad_params : ndarray
        Gradients of every learnable (raw) parameter, concatenated in the
        kernel's ``param_names`` order, each flattened row-major.
    """
    z = _vec(z, "z")
    kern, params = p.kernel()
    cache = kern.forward(z[None], params)[1]
    dZ, grads = kern.backward(cache, np.ones((1, 1)))
    flat = np.concatenate([grads[name].ravel() for name in kern.param_names])
    return dZ[0], flat


def flat_params(p):
    """Learnable parameters of ``p`` in the same order as ``similarity_gradient``."""
    kern, params = p.kernel()
    return np.concatenate([params[name].ravel() for name in kern.param_names])
