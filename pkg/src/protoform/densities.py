"""One-dimensional densities over cosine similarities, with analytic partials.

All functions broadcast over numpy arrays. The truncated families live on
[-1, 1], the range of the cosine similarity.
"""

from enum import Enum

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateDistributionError, DomainError

LOWER = -1.0
UPPER = 1.0
# below this the truncated normaliser is treated as zero
MIN_TRUNCATED_MASS = 1e-300

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class PdfFamily(str, Enum):
    GAUSSIAN = "gaussian"
    CAUCHY = "cauchy"
    TRUNC_GAUSSIAN = "trunc-gaussian"
    TRUNC_CAUCHY = "trunc-cauchy"

    @property
    def truncated(self):
        return self in (PdfFamily.TRUNC_GAUSSIAN, PdfFamily.TRUNC_CAUCHY)


def normal_pdf(x, loc, scale):
    u = (x - loc) / scale
    return np.exp(-0.5 * u * u) * _INV_SQRT_2PI / scale


def gaussian_cdf(x, mu=0.0, sigma=1.0):
    """CDF of N(mu, sigma^2), i.e. 0.5 * (1 + erf((x - mu) / (sigma * sqrt(2)))).

    ``ndtr`` evaluates the same expression without the cancellation that
    ``1 + erf`` suffers in the lower tail.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise DomainError(f"sigma must be positive, got {sigma}")
    out = ndtr((np.asarray(x, dtype=np.float64) - mu) / sigma)
    return out[()] if np.ndim(out) == 0 else out


def truncated_gaussian_mass(loc, scale):
    """Probability that N(loc, scale^2) falls inside [-1, 1]."""
    a = (LOWER - loc) / scale
    b = (UPPER - loc) / scale
    # use the upper tails when the whole interval sits right of the mean
    upper_side = a > 0
    return np.where(upper_side, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def truncated_cauchy_mass(loc, scale):
    """Cauchy mass inside [-1, 1], times pi."""
    return np.arctan((UPPER - loc) / scale) - np.arctan((LOWER - loc) / scale)


def _check_mass(mass):
    if np.any(~(mass >= MIN_TRUNCATED_MASS)):
        raise DegenerateDistributionError(
            f"truncated density has no mass on [{LOWER}, {UPPER}] "
            f"(normaliser {np.min(mass):.3e})"
        )


def pdf_terms(family, x, loc, scale):
    """Density value and its partials with respect to x, loc and scale.

    Returns
    -------
    value, d_x, d_loc, d_scale : ndarray
        Broadcast shape of the three inputs.
    """
    family = PdfFamily(family)
    x = np.asarray(x, dtype=np.float64)
    loc = np.asarray(loc, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise DomainError("scale must be positive")

    u = (x - loc) / scale
    if family in (PdfFamily.GAUSSIAN, PdfFamily.TRUNC_GAUSSIAN):
        val = np.exp(-0.5 * u * u) * _INV_SQRT_2PI / scale
        d_x = -val * u / scale
        d_scale = val * (u * u - 1.0) / scale
    else:
        q = 1.0 + u * u
        val = 1.0 / (np.pi * scale * q)
        d_x = -val * 2.0 * u / (scale * q)
        d_scale = val * (u * u - 1.0) / (scale * q)
    d_loc = -d_x

    if family is PdfFamily.TRUNC_GAUSSIAN:
        mass = truncated_gaussian_mass(loc, scale)
        _check_mass(mass)
        a = (LOWER - loc) / scale
        b = (UPPER - loc) / scale
        phi_a = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
        phi_b = np.exp(-0.5 * b * b) * _INV_SQRT_2PI
        dmass_loc = -(phi_b - phi_a) / scale
        dmass_scale = -(b * phi_b - a * phi_a) / scale
    elif family is PdfFamily.TRUNC_CAUCHY:
        arc = truncated_cauchy_mass(loc, scale)
        _check_mass(arc)
        a = (LOWER - loc) / scale
        b = (UPPER - loc) / scale
        # work with mass = arc / pi so that value / mass integrates to one
        mass = arc / np.pi
        dmass_loc = (1.0 / (1.0 + a * a) - 1.0 / (1.0 + b * b)) / (np.pi * scale)
        dmass_scale = (a / (1.0 + a * a) - b / (1.0 + b * b)) / (np.pi * scale)
    else:
        return val, d_x, d_loc, d_scale

    tval = val / mass
    return (
        tval,
        d_x / mass,
        (d_loc - tval * dmass_loc) / mass,
        (d_scale - tval * dmass_scale) / mass,
    )


def pdf_eval(family, x, loc, scale):
    """Evaluate one of the four cosine-similarity densities.

    ``loc``/``scale`` are (mu, sigma) for the Gaussian families and
    (x0, gamma) for the Cauchy families.
    """
    value = pdf_terms(family, x, loc, scale)[0]
    return value[()] if value.ndim == 0 else value
