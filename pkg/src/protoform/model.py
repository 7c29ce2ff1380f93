"""Prototypical part classifier: neck -> prototype layer -> max pool -> linear head.

Parameters live in one ordered dict keyed by dotted path
(``neck.W1``, ``proto.anchor``, ``head.W`` ...). The same order is used by
the optimizer, the checksum and the checkpoint file.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ContractViolation, FormatError, NumericalFailure
from .formulations import make_formulation

CHECKPOINT_MAGIC = b"PROTOFORM1"
EVAL_CHUNK = 256


@dataclass
class ModelConfig:
    formulation: str
    n_classes: int
    q: int = 10
    dim: int = 128
    d_in: int = 256
    d_hidden: Optional[int] = None
    patch: Tuple[int, int] = (1, 1)
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_hidden is None:
            self.d_hidden = max(1, self.d_in // 2)
        self.patch = tuple(int(v) for v in self.patch)
        if min(self.n_classes, self.q, self.dim, self.d_in, self.d_hidden, *self.patch) < 1:
            raise ConfigurationError("n_classes, q, dim, d_in, d_hidden and patch sizes must be >= 1")

    @property
    def n_prototypes(self):
        return self.n_classes * self.q


@dataclass
class ForwardPass:
    features: np.ndarray
    pre1: np.ndarray
    hidden: np.ndarray
    latent: np.ndarray      # (B, W, H, D)
    sim_map: np.ndarray     # (B, nw, nh, P)
    pooled: np.ndarray      # (B, P)
    argmax: np.ndarray      # (B, P) flat window index of the pooled cell
    logits: np.ndarray      # (B, C)
    proto_caches: list


class Model:
    def __init__(self, config, params=None, seed=0):
        self.config = config
        self.kernel = make_formulation(config.formulation, **config.options)
        if self.config.patch != (1, 1) and not self.kernel.supports_patches:
            raise ConfigurationError(
                f"patch prototypes are only supported for euclidean/cosine, not {config.formulation}"
            )
        self.proto_class = np.repeat(np.arange(config.n_classes), config.q)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params
        self._check_shapes()

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng):
        c = self.config
        params = {}
        for name, fan_in, shape in (("neck.W1", c.d_in, (c.d_in, c.d_hidden)),
                                    ("neck.b1", None, (c.d_hidden,)),
                                    ("neck.W2", c.d_hidden, (c.d_hidden, c.dim)),
                                    ("neck.b2", None, (c.dim,))):
            if fan_in is None:
                params[name] = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, shape)
        rho = self.patch_size
        proto = self.kernel.init_params(rng, c.n_prototypes * rho, c.dim)
        self.kernel.project(proto)
        for name in self.kernel.param_names:
            arr = proto[name]
            if rho > 1:
                arr = arr.reshape(c.n_prototypes, rho, *arr.shape[1:])
            params["proto." + name] = arr
        own = self.proto_class[None, :] == np.arange(c.n_classes)[:, None]
        params["head.W"] = np.where(own, 1.0, -0.5)
        params["head.b"] = np.zeros(c.n_classes)
        return params

    def _check_shapes(self):
        c = self.config
        expect = {
            "neck.W1": (c.d_in, c.d_hidden), "neck.b1": (c.d_hidden,),
            "neck.W2": (c.d_hidden, c.dim), "neck.b2": (c.dim,),
            "head.W": (c.n_classes, c.n_prototypes), "head.b": (c.n_classes,),
        }
        names = [n for n in expect if n.startswith("neck")]
        names += ["proto." + n for n in self.kernel.param_names] + ["head.W", "head.b"]
        if list(self.params) != names:
            raise ConfigurationError(f"parameter set {list(self.params)} != expected {names}")
        for name, shape in expect.items():
            if self.params[name].shape != shape:
                raise ConfigurationError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        for name in self.kernel.param_names:
            arr = self.params["proto." + name]
            if arr.shape[0] != c.n_prototypes:
                raise ConfigurationError(f"proto.{name} has {arr.shape[0]} rows, expected {c.n_prototypes}")

    @property
    def patch_size(self):
        return self.config.patch[0] * self.config.patch[1]

    def proto_params(self, offset=None):
        out = {n: self.params["proto." + n] for n in self.kernel.param_names}
        if offset is not None and self.patch_size > 1:
            out = {n: a[:, offset] for n, a in out.items()}
        return out

    def decay_exempt(self):
        return {"proto." + n for n in self.kernel.decay_exempt}

    def project(self):
        """Re-impose prototype constraints after a parameter update."""
        self.kernel.project(self.proto_params())

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    # -- forward ----------------------------------------------------------

    def neck_forward(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 4 or features.shape[-1] != self.config.d_in:
            raise ContractViolation(
                f"features must have shape (B, W, H, {self.config.d_in}), got {features.shape}"
            )
        p = self.params
        X = features.reshape(-1, self.config.d_in)
        pre1 = X @ p["neck.W1"] + p["neck.b1"]
        hidden = np.maximum(pre1, 0.0)
        latent = expit(hidden @ p["neck.W2"] + p["neck.b2"])
        return latent.reshape(*features.shape[:3], self.config.dim), pre1, hidden

    def _offsets(self, w, h):
        pw, ph = self.config.patch
        if w < pw or h < ph:
            raise ContractViolation(f"latent grid {w}x{h} smaller than patch {pw}x{ph}")
        return [(a, b) for a in range(pw) for b in range(ph)], w - pw + 1, h - ph + 1

    def prototype_forward(self, latent):
        """Similarity map (B, nw, nh, P) and per-offset kernel caches."""
        B, w, h, D = latent.shape
        if D != self.config.dim:
            raise ContractViolation(f"latent dimension {D} != prototype dimension {self.config.dim}")
        offsets, nw, nh = self._offsets(w, h)
        sim = 0.0
        caches = []
        for k, (a, b) in enumerate(offsets):
            cells = latent[:, a:a + nw, b:b + nh].reshape(-1, D)
            S, cache = self.kernel.forward(cells, self.proto_params(k))
            sim = sim + S
            caches.append(cache)
        return sim.reshape(B, nw, nh, -1), caches

    def forward(self, features):
        latent, pre1, hidden = self.neck_forward(features)
        sim_map, caches = self.prototype_forward(latent)
        B = len(latent)
        flat = sim_map.reshape(B, -1, sim_map.shape[-1])
        idx = np.argmax(flat, axis=1)
        pooled = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0]
        logits = pooled @ self.params["head.W"].T + self.params["head.b"]
        return ForwardPass(np.asarray(features, dtype=np.float64), pre1, hidden, latent,
                           sim_map, pooled, idx, logits, caches)

    def predict_logits(self, features, chunk=EVAL_CHUNK):
        out = [self.forward(features[i:i + chunk]).logits for i in range(0, len(features), chunk)]
        return np.concatenate(out) if out else np.zeros((0, self.config.n_classes))

    def pooled_scores(self, features, chunk=EVAL_CHUNK):
        return np.concatenate([self.forward(features[i:i + chunk]).pooled
                               for i in range(0, len(features), chunk)])

    # -- backward ---------------------------------------------------------

    def backward(self, fwd, d_logits, d_pooled=None, frozen=()):
        """Gradients of every parameter given upstream gradients.

        ``d_logits`` (B, C) and ``d_pooled`` (B, P) are the loss gradients with
        respect to the logits and the max-pooled scores. Parameters whose
        path starts with a prefix in ``frozen`` get no entry.
        """
        p = self.params
        grads = {}

        def want(prefix):
            return not any(prefix.startswith(f) for f in frozen)

        if want("head"):
            grads["head.W"] = d_logits.T @ fwd.pooled
            grads["head.b"] = d_logits.sum(axis=0)
        dpool = d_logits @ p["head.W"]
        if d_pooled is not None:
            dpool = dpool + d_pooled

        need_latent = want("neck")
        if want("proto") or need_latent:
            B, nw, nh, P = fwd.sim_map.shape
            dmap = np.zeros((B, nw * nh, P))
            np.put_along_axis(dmap, fwd.argmax[:, None, :], dpool[:, None, :], axis=1)
            dmap = dmap.reshape(B * nw * nh, P)
            dlatent = np.zeros_like(fwd.latent)
            offsets, _, _ = self._offsets(*fwd.latent.shape[1:3])
            pgrads = {}
            for k, ((a, b), cache) in enumerate(zip(offsets, fwd.proto_caches)):
                dcells, g = self.kernel.backward(cache, dmap)
                dlatent[:, a:a + nw, b:b + nh] += dcells.reshape(B, nw, nh, -1)
                for name, v in g.items():
                    pgrads.setdefault(name, []).append(v)
            if want("proto"):
                for name in self.kernel.param_names:
                    parts = pgrads[name]
                    grads["proto." + name] = np.stack(parts, axis=1) if self.patch_size > 1 else parts[0]
            if need_latent:
                D = self.config.dim
                Z = fwd.latent.reshape(-1, D)
                dpre2 = dlatent.reshape(-1, D) * Z * (1.0 - Z)
                X = fwd.features.reshape(-1, self.config.d_in)
                dhidden = dpre2 @ p["neck.W2"].T
                dpre1 = dhidden * (fwd.pre1 > 0)
                grads["neck.W1"] = X.T @ dpre1
                grads["neck.b1"] = dpre1.sum(axis=0)
                grads["neck.W2"] = fwd.hidden.T @ dpre2
                grads["neck.b2"] = dpre2.sum(axis=0)

        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"non-finite gradient in {name}", path=name)
        return {name: grads[name] for name in self.params if name in grads}


def make_model(formulation, n_classes, q=10, dim=128, d_in=256, d_hidden=None,
               patch=(1, 1), seed=0, **options):
    cfg = ModelConfig(formulation, n_classes, q, dim, d_in, d_hidden, patch, options)
    return Model(cfg, seed=seed)


# -- checkpoint file ------------------------------------------------------
#
#   magic         10 bytes  b"PROTOFORM1"
#   tag_len       u16, then tag (ascii)
#   C, Q, D, zeta_w, zeta_h, D_in, D_hidden, patch_w, patch_h   9 x u32
#   opts_len      u32, then formulation options as UTF-8 JSON (sorted keys)
#   n_arrays      u32
#   per array, in parameter order:
#       name_len u16, name (utf-8), ndim u8, ndim x u32 dims,
#       prod(dims) x float64 row-major
#
# All integers and floats are little-endian.

def save_checkpoint(model, path, zeta=(1, 1)):
    c = model.config
    tag = c.formulation.encode("ascii")
    opts = json.dumps(_jsonable(model.kernel.options()), sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<H", len(tag)), tag,
           struct.pack("<9I", c.n_classes, c.q, c.dim, zeta[0], zeta[1], c.d_in,
                       c.d_hidden, *c.patch),
           struct.pack("<I", len(opts)), opts, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        bname = name.encode()
        out += [struct.pack("<H", len(bname)), bname, struct.pack("<B", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape),
                np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def _jsonable(opts):
    return {k: (v.value if hasattr(v, "value") else v) for k, v in opts.items()}


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint; returns (model, zeta)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (tag_len,) = r.unpack("<H", "tag length")
    tag = r.take(tag_len, "tag").decode("ascii")
    C, Q, D, zw, zh, d_in, d_hidden, pw, ph = r.unpack("<9I", "dimensions")
    (opts_len,) = r.unpack("<I", "options length")
    opts = json.loads(r.take(opts_len, "options").decode())
    (n_arrays,) = r.unpack("<I", "array count")
    params = {}
    for _ in range(n_arrays):
        start = r.pos
        (name_len,) = r.unpack("<H", "array name length")
        name = r.take(name_len, "array name").decode()
        (ndim,) = r.unpack("<B", "array rank")
        shape = r.unpack(f"<{ndim}I", "array shape")
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(8 * count, f"array {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(params[name])):
            raise FormatError(f"non-finite values in {name}", start)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last array", r.pos)
    cfg = ModelConfig(tag, C, Q, D, d_in, d_hidden, (pw, ph), opts)
    try:
        model = Model(cfg, params)
    except ConfigurationError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
    return model, (zw, zh)
