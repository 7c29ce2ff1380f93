"""Batched similarity kernels, one class per prototype formulation.

Every kernel maps latent cells ``Z`` of shape (M, D) and a parameter dict
whose arrays lead with the prototype axis P to a score matrix (M, P).
``backward`` takes the upstream gradient (M, P) and returns the gradient
with respect to ``Z`` and every parameter array.
"""

import numpy as np
from scipy.special import expit

from .densities import PdfFamily, pdf_terms
from .errors import ConfigurationError, DomainError, InvalidPrototypeError

DEFAULT_EPS = 1e-4
SIGMA_FLOOR = 1e-3
HYPERPG_MU_INIT = 0.5
HYPERPG_SIGMA_INIT = 0.3


def softplus(x):
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    # log(expm1(y)) rewritten so large y does not overflow
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def raw_sigma_for(sigma, floor=SIGMA_FLOOR):
    """Raw parameter value that yields ``sigma`` after softplus + floor."""
    return inverse_softplus(np.asarray(sigma, dtype=np.float64) - floor)


def _unit_rows(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _norms(x, what):
    n = np.linalg.norm(x, axis=-1)
    if np.any(n == 0.0):
        raise DomainError(f"cosine similarity undefined for zero-norm {what}")
    return n


def _cos_forward(Z, anchors):
    zn = _norms(Z, "latent vector")
    an = _norms(anchors, "anchor")
    zh = Z / zn[:, None]
    ah = anchors / an[:, None]
    return zh @ ah.T, (zn, an, zh, ah)


def _cos_backward(C, parts, G):
    zn, an, zh, ah = parts
    gc = G * C
    dZ = (G @ ah - gc.sum(axis=1)[:, None] * zh) / zn[:, None]
    dA = (G.T @ zh - gc.sum(axis=0)[:, None] * ah) / an[:, None]
    return dZ, dA


class Formulation:
    """Interface shared by all kernels."""

    tag = None
    param_names = ()
    # distribution-shape parameters; excluded from weight decay
    decay_exempt = frozenset()
    hyperspherical = False
    supports_patches = False

    def init_params(self, rng, n, dim):
        raise NotImplementedError

    def forward(self, Z, params):
        raise NotImplementedError

    def backward(self, cache, G):
        raise NotImplementedError

    def project(self, params):
        """Restore parameter constraints in place after an optimizer step."""

    def validate(self, params):
        """Raise InvalidPrototypeError if constraints are violated."""

    def options(self):
        return {}

    def __repr__(self):
        opts = ", ".join(f"{k}={v!r}" for k, v in self.options().items())
        return f"{type(self).__name__}({opts})"


class Euclidean(Formulation):
    tag = "euclidean"
    param_names = ("p",)
    supports_patches = True

    def __init__(self, eps=DEFAULT_EPS):
        if not eps > 0:
            raise ConfigurationError("eps must be positive")
        self.eps = float(eps)

    def options(self):
        return {"eps": self.eps}

    def init_params(self, rng, n, dim):
        return {"p": rng.uniform(0.0, 1.0, (n, dim))}

    def forward(self, Z, params):
        diff = Z[:, None, :] - params["p"][None, :, :]
        d = np.einsum("mpd,mpd->mp", diff, diff)
        S = np.log1p(d) - np.log(d + self.eps)
        return S, (diff, d)

    def backward(self, cache, G):
        diff, d = cache
        w = 2.0 * G * (1.0 / (1.0 + d) - 1.0 / (d + self.eps))
        dZ = np.einsum("mp,mpd->md", w, diff)
        dp = -np.einsum("mp,mpd->pd", w, diff)
        return dZ, {"p": dp}


class Cosine(Formulation):
    tag = "cosine"
    param_names = ("p",)
    hyperspherical = True
    supports_patches = True

    def init_params(self, rng, n, dim):
        return {"p": _unit_rows(rng, n, dim)}

    def forward(self, Z, params):
        C, parts = _cos_forward(Z, params["p"])
        return C, (C, parts)

    def backward(self, cache, G):
        C, parts = cache
        dZ, dp = _cos_backward(C, parts, G)
        return dZ, {"p": dp}


class ScaledDot(Formulation):
    tag = "sdot"
    param_names = ("p",)

    def init_params(self, rng, n, dim):
        return {"p": _unit_rows(rng, n, dim)}

    def forward(self, Z, params):
        scale = 1.0 / np.sqrt(Z.shape[1])
        return (Z @ params["p"].T) * scale, (Z, params["p"], scale)

    def backward(self, cache, G):
        Z, p, scale = cache
        return (G @ p) * scale, {"p": (G.T @ Z) * scale}


class Gaussian(Formulation):
    """Diagonal Gaussian, scored by its log-density."""

    tag = "gaussian"
    param_names = ("mean", "log_var")
    decay_exempt = frozenset({"log_var"})

    def __init__(self, log_var_init=0.0):
        self.log_var_init = float(log_var_init)

    def options(self):
        return {"log_var_init": self.log_var_init}

    def init_params(self, rng, n, dim):
        return {
            "mean": rng.uniform(0.0, 1.0, (n, dim)),
            "log_var": np.full((n, dim), self.log_var_init),
        }

    def forward(self, Z, params):
        lv = params["log_var"]
        inv = np.exp(-lv)
        diff = Z[:, None, :] - params["mean"][None, :, :]
        wdiff = diff * inv[None]
        quad = np.einsum("mpd,mpd->mp", wdiff, diff)
        const = Z.shape[1] * np.log(2.0 * np.pi) + lv.sum(axis=1)
        S = -0.5 * (const[None, :] + quad)
        return S, (diff, wdiff)

    def backward(self, cache, G):
        diff, wdiff = cache
        dZ = -np.einsum("mp,mpd->md", G, wdiff)
        dmean = np.einsum("mp,mpd->pd", G, wdiff)
        dlv = -0.5 * (G.sum(axis=0)[:, None] - np.einsum("mp,mpd->pd", G, wdiff * diff))
        return dZ, {"mean": dmean, "log_var": dlv}


class HyperPG(Formulation):
    """Density over the cosine similarity to a learned anchor."""

    param_names = ("anchor", "mu", "raw_sigma")
    decay_exempt = frozenset({"mu", "raw_sigma"})
    hyperspherical = True

    _tags = {
        PdfFamily.GAUSSIAN: "hyperpg",
        PdfFamily.CAUCHY: "hyperpg-cauchy",
        PdfFamily.TRUNC_GAUSSIAN: "hyperpg-trunc-gauss",
        PdfFamily.TRUNC_CAUCHY: "hyperpg-trunc-cauchy",
    }

    def __init__(self, family=PdfFamily.TRUNC_GAUSSIAN, sigma_floor=SIGMA_FLOOR,
                 mu_init=HYPERPG_MU_INIT, sigma_init=HYPERPG_SIGMA_INIT):
        self.family = PdfFamily(family)
        self.sigma_floor = float(sigma_floor)
        self.mu_init = float(mu_init)
        self.sigma_init = float(sigma_init)
        self.tag = self._tags[self.family]

    def options(self):
        return {"family": self.family.value, "sigma_floor": self.sigma_floor,
                "mu_init": self.mu_init, "sigma_init": self.sigma_init}

    def sigma(self, raw_sigma):
        return softplus(raw_sigma) + self.sigma_floor

    def init_params(self, rng, n, dim):
        return {
            "anchor": _unit_rows(rng, n, dim),
            "mu": np.full(n, self.mu_init),
            "raw_sigma": np.full(n, raw_sigma_for(self.sigma_init, self.sigma_floor)),
        }

    def forward(self, Z, params):
        C, parts = _cos_forward(Z, params["anchor"])
        sigma = self.sigma(params["raw_sigma"])
        S, d_x, d_loc, d_scale = pdf_terms(self.family, C, params["mu"][None, :], sigma[None, :])
        return S, (C, parts, d_x, d_loc, d_scale, params["raw_sigma"])

    def backward(self, cache, G):
        C, parts, d_x, d_loc, d_scale, raw = cache
        dZ, dA = _cos_backward(C, parts, G * d_x)
        dmu = (G * d_loc).sum(axis=0)
        draw = (G * d_scale).sum(axis=0) * expit(raw)
        return dZ, {"anchor": dA, "mu": dmu, "raw_sigma": draw}


class VonMisesFisher(Formulation):
    """Unnormalised vMF log-density: kappa * cos(z, anchor)."""

    tag = "vmf"
    param_names = ("anchor", "log_kappa")
    decay_exempt = frozenset({"log_kappa"})
    hyperspherical = True

    def __init__(self, kappa_init=1.0):
        self.kappa_init = float(kappa_init)

    def options(self):
        return {"kappa_init": self.kappa_init}

    def init_params(self, rng, n, dim):
        return {"anchor": _unit_rows(rng, n, dim),
                "log_kappa": np.full(n, np.log(self.kappa_init))}

    def forward(self, Z, params):
        C, parts = _cos_forward(Z, params["anchor"])
        kappa = np.exp(params["log_kappa"])
        return kappa[None, :] * C, (C, parts, kappa)

    def backward(self, cache, G):
        C, parts, kappa = cache
        dZ, dA = _cos_backward(C, parts, G * kappa[None, :])
        dlk = (G * C).sum(axis=0) * kappa
        return dZ, {"anchor": dA, "log_kappa": dlk}


class FisherBingham(Formulation):
    """Unnormalised Fisher-Bingham log-density on the unit sphere.

    ``axes[p]`` holds the orthonormal frame row-wise; row 0 is the mean
    direction, rows 1.. carry the ellipticity weights ``beta``.
    """

    tag = "fb"
    param_names = ("axes", "log_kappa", "beta")
    decay_exempt = frozenset({"axes", "log_kappa", "beta"})
    hyperspherical = True

    def __init__(self, kappa_init=2.0, tol=1e-8):
        self.kappa_init = float(kappa_init)
        self.tol = float(tol)

    def options(self):
        return {"kappa_init": self.kappa_init}

    def init_params(self, rng, n, dim):
        axes = np.stack([np.linalg.qr(rng.standard_normal((dim, dim)))[0].T for _ in range(n)])
        beta = np.full((n, dim - 1), 1.0 / max(dim - 1, 1))
        kappa = max(self.kappa_init, 2.0 * beta.max(initial=0.0) + 1.0)
        params = {"axes": axes, "log_kappa": np.full(n, np.log(kappa)), "beta": beta}
        self.project(params)
        return params

    def forward(self, Z, params):
        zn = _norms(Z, "latent vector")
        v = Z / zn[:, None]
        A = params["axes"]
        kappa = np.exp(params["log_kappa"])
        beta = params["beta"]
        proj = np.einsum("md,pjd->mpj", v, A)
        S = kappa[None, :] * proj[:, :, 0] + np.einsum("pj,mpj->mp", beta, proj[:, :, 1:] ** 2)
        return S, (zn, v, A, kappa, beta, proj)

    def backward(self, cache, G):
        zn, v, A, kappa, beta, proj = cache
        coef = np.empty_like(proj)
        coef[:, :, 0] = kappa[None, :]
        coef[:, :, 1:] = 2.0 * beta[None, :, :] * proj[:, :, 1:]
        W = G[:, :, None] * coef
        dA = np.einsum("mpj,md->pjd", W, v)
        dv = np.einsum("mpj,pjd->md", W, A)
        dZ = (dv - np.einsum("md,md->m", dv, v)[:, None] * v) / zn[:, None]
        dlk = (G * proj[:, :, 0]).sum(axis=0) * kappa
        dbeta = np.einsum("mp,mpj->pj", G, proj[:, :, 1:] ** 2)
        return dZ, {"axes": dA, "log_kappa": dlk, "beta": dbeta}

    def project(self, params):
        # nearest orthonormal frame (polar factor)
        u, _, vt = np.linalg.svd(params["axes"])
        params["axes"][...] = u @ vt
        beta = params["beta"]
        if beta.shape[-1]:
            beta += ((1.0 - beta.sum(axis=-1)) / beta.shape[-1])[..., None]
            # lift kappa rather than clip beta so that both constraints hold
            need = 2.0 * np.abs(beta).max(axis=-1) * (1.0 + 1e-6) + 1e-12
            params["log_kappa"][...] = np.maximum(params["log_kappa"], np.log(need))

    def validate(self, params):
        A = params["axes"]
        dim = A.shape[-1]
        gram = np.einsum("pjd,pkd->pjk", A, A)
        if not np.allclose(gram, np.eye(dim), atol=1e-8):
            raise InvalidPrototypeError("Fisher-Bingham axes must be orthonormal")
        beta = params["beta"]
        kappa = np.exp(params["log_kappa"])
        if beta.shape[-1] and not np.allclose(beta.sum(axis=-1), 1.0, atol=1e-8):
            raise InvalidPrototypeError("Fisher-Bingham beta must sum to one")
        if np.any(2.0 * np.abs(beta) >= kappa[..., None]):
            raise InvalidPrototypeError("Fisher-Bingham requires 2|beta_j| < kappa")


class MixtureHyperPG(Formulation):
    """Each prototype is a softmax-weighted mixture of K HyperPG components."""

    tag = "mixture"
    param_names = ("anchor", "mu", "raw_sigma", "logits_pi")
    decay_exempt = frozenset({"mu", "raw_sigma", "logits_pi"})
    hyperspherical = True

    def __init__(self, n_components=2, family=PdfFamily.TRUNC_GAUSSIAN, sigma_floor=SIGMA_FLOOR):
        if n_components < 1:
            raise ConfigurationError("mixture needs at least one component")
        self.n_components = int(n_components)
        self.component = HyperPG(family, sigma_floor)

    def options(self):
        return {"n_components": self.n_components, "family": self.component.family.value,
                "sigma_floor": self.component.sigma_floor}

    def init_params(self, rng, n, dim):
        k = self.n_components
        flat = self.component.init_params(rng, n * k, dim)
        return {
            "anchor": flat["anchor"].reshape(n, k, dim),
            "mu": flat["mu"].reshape(n, k),
            "raw_sigma": flat["raw_sigma"].reshape(n, k),
            "logits_pi": np.zeros((n, k)),
        }

    def forward(self, Z, params):
        n, k, dim = params["anchor"].shape
        flat = {
            "anchor": params["anchor"].reshape(n * k, dim),
            "mu": params["mu"].reshape(n * k),
            "raw_sigma": params["raw_sigma"].reshape(n * k),
        }
        H, hcache = self.component.forward(Z, flat)
        H = H.reshape(len(Z), n, k)
        logits = params["logits_pi"]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        pi = e / e.sum(axis=1, keepdims=True)
        S = np.einsum("pk,mpk->mp", pi, H)
        return S, (hcache, H, pi, S, (n, k, dim))

    def backward(self, cache, G):
        hcache, H, pi, S, (n, k, dim) = cache
        GH = (G[:, :, None] * pi[None]).reshape(len(G), n * k)
        dZ, g = self.component.backward(hcache, GH)
        dlogits = np.einsum("mp,mpk->pk", G, pi[None] * (H - S[:, :, None]))
        return dZ, {
            "anchor": g["anchor"].reshape(n, k, dim),
            "mu": g["mu"].reshape(n, k),
            "raw_sigma": g["raw_sigma"].reshape(n, k),
            "logits_pi": dlogits,
        }


FORMULATION_TAGS = (
    "euclidean", "cosine", "sdot", "gaussian", "hyperpg", "hyperpg-cauchy",
    "hyperpg-trunc-gauss", "hyperpg-trunc-cauchy", "vmf", "fb", "mixture",
)


def make_formulation(tag, **options):
    """Build the kernel for a formulation tag.

    ``options`` are the constructor keywords of the kernel class (as returned
    by ``Formulation.options``); unknown tags raise ConfigurationError.
    """
    families = {
        "hyperpg": PdfFamily.GAUSSIAN,
        "hyperpg-cauchy": PdfFamily.CAUCHY,
        "hyperpg-trunc-gauss": PdfFamily.TRUNC_GAUSSIAN,
        "hyperpg-trunc-cauchy": PdfFamily.TRUNC_CAUCHY,
    }
    if tag in families:
        options.setdefault("family", families[tag])
        if PdfFamily(options["family"]) is not families[tag]:
            raise ConfigurationError(f"tag {tag!r} fixes the density family")
        return HyperPG(**options)
    simple = {
        "euclidean": Euclidean,
        "cosine": Cosine,
        "sdot": ScaledDot,
        "gaussian": Gaussian,
        "vmf": VonMisesFisher,
        "fb": FisherBingham,
        "mixture": MixtureHyperPG,
    }
    if tag not in simple:
        raise ConfigurationError(
            f"unknown formulation {tag!r}; valid tags: {', '.join(FORMULATION_TAGS)}"
        )
    return simple[tag](**options)
