"""Interpretability exports and ablation sweeps."""

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, DomainError, NumericalFailure
from .formulations import HyperPG
from .training import train

SPHERE_RESOLUTION = (181, 360)
SWEEP_AXES = {"q": "q", "prototypes": "q", "dim": "dim", "dimensions": "dim"}


def worker_count():
    """Worker cap from PROTOFORM_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("PROTOFORM_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("PROTOFORM_THREADS must be an integer") from None


# -- nearest training patches ---------------------------------------------

def nearest_patches(model, dataset, proto_index, k=3, chunk=256):
    """The ``k`` most similar latent cells of ``dataset`` for one prototype.

    Returns a list of ``(record_index, (row, col), similarity)`` sorted by
    similarity descending, ties broken by record then cell order.
    """
    if len(dataset) == 0:
        raise ConfigurationError("nearest_patches needs a non-empty dataset")
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if not 0 <= proto_index < model.config.n_prototypes:
        raise ConfigurationError(f"prototype index {proto_index} out of range")
    maps = []
    for i in range(0, len(dataset), chunk):
        latent = model.neck_forward(dataset.features[i:i + chunk])[0]
        maps.append(model.prototype_forward(latent)[0][..., proto_index])
    sim = np.concatenate(maps)                      # (N, nw, nh)
    n, nw, nh = sim.shape
    rec, row, col = np.meshgrid(np.arange(n), np.arange(nw), np.arange(nh), indexing="ij")
    flat = sim.ravel()
    order = np.lexsort((col.ravel(), row.ravel(), rec.ravel(), -flat))[:k]
    return [(int(rec.flat[j]), (int(row.flat[j]), int(col.flat[j])), float(flat[j])) for j in order]


# -- sphere activations ---------------------------------------------------

@dataclass(eq=False)
class SphereGrid:
    lat: np.ndarray      # degrees, (n_lat,)
    lon: np.ndarray      # degrees, (n_lon,)
    vectors: np.ndarray  # (n_lat, n_lon, 3) unit vectors
    values: np.ndarray   # (n_lat, n_lon)

    def argmax_cells(self, rtol=1e-12):
        """All (lat_index, lon_index) cells within rtol of the maximum."""
        top = self.values.max()
        return np.argwhere(self.values >= top - rtol * abs(top))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lon", "lat", "value"])
            for i, la in enumerate(self.lat):
                for j, lo in enumerate(self.lon):
                    w.writerow([f"{lo:g}", f"{la:g}", repr(float(self.values[i, j]))])

    def write_svg(self, path, cell=2, step=4):
        """Equirectangular heatmap, one rect per ``step`` x ``step`` block of cells."""
        vals = self.values[::-1][::step, ::step]    # north at the top
        lo, hi = float(vals.min()), float(vals.max())
        span = hi - lo or 1.0
        h, w = vals.shape
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}" '
                 f'shape-rendering="crispEdges">']
        for i in range(h):
            for j in range(w):
                t = (vals[i, j] - lo) / span
                r, g, b = int(255 * t), int(64 + 96 * (1 - abs(2 * t - 1))), int(255 * (1 - t))
                parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                             f'fill="rgb({r},{g},{b})"/>')
        parts.append("</svg>\n")
        with open(path, "w") as fh:
            fh.write("\n".join(parts))


def sphere_points(resolution=SPHERE_RESOLUTION):
    n_lat, n_lon = resolution
    lat = np.linspace(-90.0, 90.0, n_lat)
    lon = np.arange(n_lon) * (360.0 / n_lon)
    la, lo = np.deg2rad(lat)[:, None], np.deg2rad(lon)[None, :]
    vec = np.stack(np.broadcast_arrays(np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)),
                   axis=-1)
    # exact poles: cos(+-90 deg) is ~6e-17, not 0
    vec[0] = (0.0, 0.0, -1.0)
    vec[-1] = (0.0, 0.0, 1.0)
    return lat, lon, vec


def _spherical_kernel(p):
    kern, params = p.kernel()
    if not kern.hyperspherical:
        raise ConfigurationError(
            f"{p.tag} prototypes are not hyperspherical; sphere rendering supports "
            "cosine, hyperpg, hyperpg-cauchy, hyperpg-trunc-gauss, hyperpg-trunc-cauchy, vmf, fb, mixture"
        )
    return kern, params


def sphere_activation_grid(p, resolution=SPHERE_RESOLUTION):
    """Similarity of prototype ``p`` (D = 3) on a latitude/longitude lattice."""
    kern, params = _spherical_kernel(p)
    dim = next(iter(params.values())).shape[-1]
    if dim != 3:
        raise ConfigurationError(f"sphere grids need D = 3, got D = {dim}; use cosine_value_curve")
    lat, lon, vec = sphere_points(resolution)
    values = kern.forward(vec.reshape(-1, 3), params)[0][:, 0].reshape(vec.shape[:2])
    return SphereGrid(lat, lon, vec, values)


def cosine_value_curve(p, n=201):
    """Similarity along a great circle through the prototype's leading direction.

    Returns (cosines, values) with cosines running from -1 to 1. For
    rotationally symmetric prototypes (cosine, HyperPG, vMF) this is the full
    profile in any dimension.
    """
    kern, params = _spherical_kernel(p)
    lead = next(iter(params.values()))
    axis = lead.reshape(-1, lead.shape[-1])[0]
    axis = axis / np.linalg.norm(axis)
    perp = np.zeros_like(axis)
    perp[np.argmin(np.abs(axis))] = 1.0
    perp -= (perp @ axis) * axis
    perp /= np.linalg.norm(perp)
    t = np.linspace(-1.0, 1.0, n)
    vec = t[:, None] * axis + np.sqrt(np.clip(1 - t * t, 0, None))[:, None] * perp
    return t, kern.forward(vec, params)[0][:, 0]


# -- learned HyperPG parameters -------------------------------------------

def param_scatter(model):
    """(prototype id, mu, sigma) for every prototype of a HyperPG model."""
    if not isinstance(model.kernel, HyperPG):
        raise ConfigurationError(f"parameter scatter needs a HyperPG bank, not {model.config.formulation}")
    mu = model.params["proto.mu"]
    sigma = model.kernel.sigma(model.params["proto.raw_sigma"])
    return [(i, float(m), float(s)) for i, (m, s) in enumerate(zip(mu, sigma))]


def write_scatter_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["proto_id", "mu", "sigma"])
        for pid, mu, sigma in rows:
            w.writerow([pid, repr(mu), repr(sigma)])


# -- ablation sweeps ------------------------------------------------------

@dataclass
class SweepRow:
    formulation: str
    axis_value: int
    seed: int
    test_acc: float


@dataclass
class SweepResult:
    axis: str
    values: list
    rows: list

    def table(self):
        """{formulation: [(value, mean, std), ...]} over seeds, NaN runs excluded."""
        out = {}
        for f in dict.fromkeys(r.formulation for r in self.rows):
            stats = []
            for v in self.values:
                accs = np.array([r.test_acc for r in self.rows
                                 if r.formulation == f and r.axis_value == v])
                accs = accs[np.isfinite(accs)]
                stats.append((v, float(accs.mean()) if accs.size else float("nan"),
                              float(accs.std()) if accs.size else float("nan")))
            out[f] = stats
        return out

    def spread(self, formulation):
        """max - min of the seed-mean accuracy across axis values."""
        means = np.array([m for _, m, _ in self.table()[formulation]])
        return float(np.max(means) - np.min(means))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["formulation", "axis_value", "seed", "test_acc"])
            for r in self.rows:
                w.writerow([r.formulation, r.axis_value, r.seed, repr(r.test_acc)])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["formulation", "axis", "axis_value", "mean_test_acc", "std_test_acc"])
            for f, stats in self.table().items():
                for v, m, s in stats:
                    w.writerow([f, self.axis, v, repr(m), repr(s)])


def _sweep_job(job):
    formulation, field_name, value, seed, base, train_set, test_set = job
    cfg = replace(base, formulation=formulation, seed=seed, **{field_name: value})
    try:
        _, report = train(train_set, test_set, cfg)
        acc = report.final_accuracy
    except (NumericalFailure, DomainError):
        acc = float("nan")
    return SweepRow(formulation, value, seed, acc)


def run_sweep(axis, values, base, seeds, train_set, test_set, formulations=None, workers=None):
    """Train one model per (formulation, value, seed) and collect final test accuracy.

    ``axis`` is ``"q"`` (prototypes per class) or ``"dim"`` (prototype
    dimensions). Diverged runs are recorded with NaN accuracy.
    """
    if axis not in SWEEP_AXES:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; use one of {sorted(SWEEP_AXES)}")
    values, seeds = list(values), list(seeds)
    if not values or not seeds:
        raise ConfigurationError("sweep needs at least one value and one seed")
    formulations = list(formulations or [base.formulation])
    field_name = SWEEP_AXES[axis]
    jobs = [(f, field_name, int(v), int(s), base, train_set, test_set)
            for f in formulations for v in values for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    return SweepResult(field_name, [int(v) for v in values], rows)
