"""AdamW, the minibatch training loop and top-1 evaluation."""

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigurationError, NumericalFailure
from .losses import (LAMBDA_CLST, LAMBDA_SEP, BatchSimilarities, LossWeights,
                     cluster_loss_and_grad, separation_loss_and_grad,
                     softmax_cross_entropy, total_loss)
from .model import EVAL_CHUNK, Model, ModelConfig

FREEZABLE = ("neck", "proto", "head")


@dataclass
class TrainConfig:
    formulation: str = "hyperpg-trunc-gauss"
    q: int = 10
    dim: int = 128
    epochs: int = 30
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 48
    seed: int = 0
    lambda_clst: float = LAMBDA_CLST
    lambda_sep: float = LAMBDA_SEP
    d_hidden: Optional[int] = None
    patch: Tuple[int, int] = (1, 1)
    freeze: Tuple[str, ...] = ()
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ConfigurationError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        self.freeze = tuple(self.freeze)
        unknown = set(self.freeze) - set(FREEZABLE)
        if unknown:
            raise ConfigurationError(f"cannot freeze {sorted(unknown)}; choose from {FREEZABLE}")
        self.patch = tuple(self.patch)
        self.betas = tuple(self.betas)

    @property
    def weights(self):
        return LossWeights(self.lambda_clst, self.lambda_sep)

    def model_config(self, n_classes, d_in):
        return ModelConfig(self.formulation, n_classes, self.q, self.dim, d_in,
                           self.d_hidden, self.patch, dict(self.options))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, cfg, exempt=()):
    """One AdamW update, in place. Returns (params, state).

    Weight decay is decoupled (p -= lr * wd * p) and skipped for paths in
    ``exempt``. Parameters without a gradient entry are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient in {name}", path=name)
    b1, b2 = cfg.betas
    lr = cfg.learning_rate
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay and name not in exempt:
            p -= lr * cfg.weight_decay * p
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


def _losses(model, fwd, labels, weights):
    ce, dlogits = softmax_cross_entropy(fwd.logits, labels)
    batch = BatchSimilarities(fwd.pooled, labels, model.proto_class)
    clst, gclst = cluster_loss_and_grad(batch)
    sep, gsep = separation_loss_and_grad(batch)
    total = total_loss(ce, clst, sep, weights)
    d_pooled = weights.lambda_clst * gclst + weights.lambda_sep * gsep
    return (ce, clst, sep, total), dlogits, d_pooled


def loss_and_grads(model, features, labels, weights=LossWeights(), frozen=()):
    """Loss components (ce, clst, sep, total) on one batch and parameter gradients."""
    fwd = model.forward(features)
    terms, dlogits, d_pooled = _losses(model, fwd, np.asarray(labels), weights)
    return terms, model.backward(fwd, dlogits, d_pooled, frozen)


def evaluate_losses(model, dataset, weights=LossWeights(), chunk=EVAL_CHUNK):
    """Sample-weighted mean (ce, clst, sep, total) over a dataset, no gradients."""
    sums = np.zeros(4)
    for i in range(0, len(dataset), chunk):
        labels = dataset.labels[i:i + chunk]
        fwd = model.forward(dataset.features[i:i + chunk])
        sums += np.array(_losses(model, fwd, labels, weights)[0]) * len(labels)
    return tuple(sums / len(dataset))


def evaluate_top1(model, dataset):
    """Fraction of records whose argmax logit (lowest index on ties) is the label."""
    if len(dataset) == 0:
        raise ConfigurationError("cannot evaluate on an empty dataset")
    pred = np.argmax(model.predict_logits(dataset.features), axis=1)
    return float(np.mean(pred == dataset.labels))


@dataclass
class EpochRow:
    epoch: int
    ce: float
    clst: float
    sep: float
    total: float
    test_acc: float


@dataclass
class RunReport:
    config: dict
    rows: list
    wall_time: float = 0.0
    params_checksum: str = ""

    CSV_FIELDS = ("epoch", "ce", "clst", "sep", "total", "test_acc")

    @property
    def final_accuracy(self):
        return self.rows[-1].test_acc

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.rows:
            w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in self.CSV_FIELDS[1:]])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def summary(self):
        return {
            "config": self.config,
            "epochs": len(self.rows) - 1,
            "final_test_acc": self.final_accuracy,
            "best_test_acc": max(r.test_acc for r in self.rows),
            "final_total_loss": self.rows[-1].total,
            "wall_time_s": self.wall_time,
            "params_checksum": self.params_checksum,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def train(train_set, test_set, cfg, model=None, log=None):
    """Train a model with minibatch AdamW on the multi-objective loss.

    Row 0 of the report is the evaluation before any update. Returns
    ``(model, report)``. Batches for epoch ``e`` come from a generator
    seeded with ``(cfg.seed, e)``.
    """
    if train_set.n_classes < 2:
        raise ConfigurationError("training needs at least two classes")
    if len(train_set) == 0 or len(test_set) == 0:
        raise ConfigurationError("train and test splits must be non-empty")
    start = time.perf_counter()
    if model is None:
        model = Model(cfg.model_config(train_set.n_classes, train_set.d_in), seed=cfg.seed)
    weights = cfg.weights
    frozen = cfg.freeze
    exempt = model.decay_exempt()
    state = AdamState()

    rows = [EpochRow(0, *evaluate_losses(model, train_set, weights), evaluate_top1(model, test_set))]
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums = np.zeros(4)
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            try:
                terms, grads = loss_and_grads(model, train_set.features[idx], train_set.labels[idx],
                                              weights, frozen)
                if not np.isfinite(terms[3]):
                    raise NumericalFailure("loss is not finite", epoch=epoch)
                adamw_step(model.params, grads, state, cfg, exempt)
            except NumericalFailure as exc:
                exc.epoch = epoch
                raise NumericalFailure(f"epoch {epoch}: {exc}", path=exc.path, epoch=epoch) from exc
            model.project()
            sums += np.array(terms) * len(idx)
        row = EpochRow(epoch, *(sums / n), evaluate_top1(model, test_set))
        rows.append(row)
        if log is not None:
            log(row)

    report = RunReport(config=_config_dict(cfg), rows=rows,
                       wall_time=time.perf_counter() - start,
                       params_checksum=model.checksum())
    return model, report


def _config_dict(cfg):
    d = asdict(cfg)
    d["patch"] = list(cfg.patch)
    d["freeze"] = list(cfg.freeze)
    d["betas"] = list(cfg.betas)
    d["options"] = {k: (v.value if hasattr(v, "value") else v) for k, v in cfg.options.items()}
    return d
