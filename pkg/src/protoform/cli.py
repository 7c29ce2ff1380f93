"""Command-line entry point: ``protoform <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import analysis, data, gradcheck
from .errors import ProtoformError
from .formulations import FORMULATION_TAGS, raw_sigma_for
from .geometry import (CosinePrototype, FisherBinghamPrototype, HyperPGPrototype,
                       MixturePrototype, VMFPrototype)
from .densities import PdfFamily
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate_top1, train

EMB_FORMAT = """\
PROTOEMB1 file (little-endian): 9-byte magic "PROTOEMB1"; u32 N, C, zeta_w,
zeta_h, D_in; then N records of (u32 label, zeta_w*zeta_h*D_in float32 values,
row-major over width, height, channel)."""

CKPT_FORMAT = """\
PROTOFORM1 checkpoint (little-endian): 10-byte magic "PROTOFORM1"; u16 tag
length + ascii formulation tag; u32 C, Q, D, zeta_w, zeta_h, D_in, D_hidden,
patch_w, patch_h; u32 length + JSON formulation options; u32 array count; per
array: u16 name length, name, u8 rank, u32 dims, float64 data (row-major)."""

CONFIG_HELP = """\
--config FILE reads flat key=value lines ('#' starts a comment). Keys are the
long flag names (e.g. lr, wd, batch, epochs, seed, q, dim, lambda-clst) or the
TrainConfig field names (learning_rate, weight_decay, batch_size, ...).
Precedence: built-in defaults < config file < explicit command-line flags."""

_ALIASES = {"learning_rate": "lr", "weight_decay": "wd", "batch_size": "batch"}


class UsageError(Exception):
    def __init__(self, message, parser):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _pair(text):
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None


def _formulations(text):
    tags = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in tags if t not in FORMULATION_TAGS]
    if bad or not tags:
        raise argparse.ArgumentTypeError(
            f"unknown formulation {', '.join(bad) or text!r}; valid tags: {', '.join(FORMULATION_TAGS)}"
        )
    return tags


def _common(p, out_default="run"):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", default=out_default, help="run directory; all outputs go here")
    p.add_argument("--config", help="key=value file with flag defaults")


def _train_flags(p, multi=False):
    if multi:
        p.add_argument("--formulation", type=_formulations, default=["cosine", "hyperpg-trunc-gauss"],
                       help="comma-separated tags from: " + ", ".join(FORMULATION_TAGS))
    else:
        p.add_argument("--formulation", choices=FORMULATION_TAGS, default="hyperpg-trunc-gauss")
    p.add_argument("--data", required=True, help="training PROTOEMB1 file")
    p.add_argument("--test", help="test PROTOEMB1 file; default: stratified 80/20 split of --data")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-4, help="AdamW learning rate (default 1e-4)")
    p.add_argument("--wd", type=float, default=1e-4, help="decoupled weight decay (default 1e-4)")
    p.add_argument("--batch", type=int, default=48, help="minibatch size (default 48)")
    p.add_argument("--q", type=int, default=10, help="prototypes per class (default 10)")
    p.add_argument("--dim", type=int, default=128, help="prototype dimensionality (default 128)")
    p.add_argument("--lambda-clst", type=float, default=0.8)
    p.add_argument("--lambda-sep", type=float, default=0.08)
    p.add_argument("--d-hidden", type=int, help="neck hidden width (default D_in/2)")
    p.add_argument("--patch", type=_pair, default=(1, 1), help="prototype patch WxH (euclidean/cosine)")
    p.add_argument("--freeze", type=_csv_list(str), default=[],
                   help="comma list of parameter groups to freeze: neck, proto, head")


def build_parser():
    parser = _Parser(prog="protoform", description="Prototype formulations for part-based classifiers.",
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", formatter_class=raw,
                       epilog="Writes train.emb, test.emb and stats.csv under --out.\n\n" + EMB_FORMAT
                       + "\n\n" + CONFIG_HELP)
    p.add_argument("--kind", choices=("hyperspherical_vmf", "euclidean_blobs"), default="hyperspherical_vmf")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--d-in", type=int, default=32)
    p.add_argument("--zeta", type=_pair, default=(1, 1), help="latent grid WxH")
    p.add_argument("--kappa-gen", type=float, default=200.0, help="directional concentration")
    p.add_argument("--spread", type=float, default=3.0, help="blob centre std")
    p.add_argument("--noise", type=float, default=1.0, help="blob noise std")
    p.add_argument("--norm-range", type=_csv_list(float), default=[0.5, 2.0], help="lo,hi record norms")
    _common(p)

    p = sub.add_parser("train", help="train a model", formatter_class=raw,
                       epilog="Writes report.csv (epoch,ce,clst,sep,total,test_acc), summary.json and "
                       "model.ckpt under --out.\n\n" + EMB_FORMAT + "\n\n" + CKPT_FORMAT + "\n\n" + CONFIG_HELP)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint", formatter_class=raw,
                       epilog="Writes eval.json under --out.\n\n" + EMB_FORMAT + "\n\n" + CKPT_FORMAT)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _common(p)

    p = sub.add_parser("sweep", help="ablation over prototypes per class or dimensions",
                       formatter_class=raw,
                       epilog="Writes sweep.csv (formulation,axis_value,seed,test_acc) and "
                       "sweep_summary.csv under --out. PROTOFORM_THREADS caps worker processes.\n\n"
                       + EMB_FORMAT + "\n\n" + CONFIG_HELP)
    p.add_argument("--axis", choices=("q", "dim"), required=True)
    p.add_argument("--values", type=_csv_list(int), required=True, help="comma-separated axis values")
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    _train_flags(p, multi=True)
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of similarity gradients",
                       formatter_class=raw,
                       epilog="Prints per-formulation max relative error and writes gradcheck.csv "
                       "under --out. Exit code 2 if any error reaches 1e-4.")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--all", action="store_true", help="check every formulation")
    g.add_argument("--formulation", type=_formulations)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--step", type=float, default=gradcheck.FD_STEP)
    _common(p)

    p = sub.add_parser("sphere", help="activation grid of a 3-D hyperspherical prototype",
                       formatter_class=raw,
                       epilog="Writes sphere.csv (lon,lat,value) and optionally sphere.svg under --out. "
                       "Supported: cosine, hyperpg*, vmf, fb, mixture. Mixture takes comma lists "
                       "for --mu and --sigma (components share the anchor).")
    p.add_argument("--formulation", choices=("cosine", "hyperpg", "hyperpg-cauchy", "hyperpg-trunc-gauss",
                                             "hyperpg-trunc-cauchy", "vmf", "fb", "mixture"),
                   default="hyperpg-trunc-gauss")
    p.add_argument("--anchor", type=_csv_list(float), default=[0.0, 0.0, 1.0])
    p.add_argument("--mu", type=_csv_list(float), default=[1.0])
    p.add_argument("--sigma", type=_csv_list(float), default=[0.1])
    p.add_argument("--kappa", type=float, default=10.0)
    p.add_argument("--beta", type=_csv_list(float), default=[0.5, 0.5], help="fb ellipticity (2 values)")
    p.add_argument("--resolution", type=_pair, default=analysis.SPHERE_RESOLUTION, help="LATxLON cells")
    p.add_argument("--svg", action="store_true")
    _common(p)

    p = sub.add_parser("scatter", help="learned (mu, sigma) of a HyperPG checkpoint", formatter_class=raw,
                       epilog="Writes scatter.csv (proto_id,mu,sigma) under --out.\n\n" + CKPT_FORMAT)
    p.add_argument("--checkpoint", required=True)
    _common(p)

    p = sub.add_parser("nearest", help="most similar training patches of a prototype", formatter_class=raw,
                       epilog="Writes nearest.csv (rank,record,row,col,similarity) under --out.\n\n"
                       + EMB_FORMAT + "\n\n" + CKPT_FORMAT)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--proto", type=int, required=True, help="prototype index")
    p.add_argument("--k", type=int, default=3)
    _common(p)
    return parser


def _read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (t.strip() for t in line.split("=", 1))
            values[key] = value
    return values


def _apply_config(parser, sub, argv):
    """Use the config file values as subparser defaults (explicit flags still win)."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        values = _read_config(known.config)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config: {exc}", sub) from None
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    defaults = {}
    for key, text in values.items():
        dest = _ALIASES.get(key, key).replace("-", "_")
        action = actions.get(dest)
        if action is None or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}", sub)
        if action.nargs == 0:
            value = text.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(text) if action.type else text
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}", sub) from None
            if action.choices and value not in action.choices:
                raise UsageError(f"config key {key!r}: invalid choice {value!r}", sub)
        defaults[dest] = value
        action.required = False
    sub.set_defaults(**defaults)


def _load_splits(args):
    train_set = data.load_embeddings(args.data, "train")
    if args.test:
        return train_set, data.load_embeddings(args.test, "test")
    return data.stratified_split(train_set, 0.2, np.random.default_rng(args.seed))


def _train_config(args, formulation):
    return TrainConfig(formulation=formulation, q=args.q, dim=args.dim, epochs=args.epochs,
                       learning_rate=args.lr, weight_decay=args.wd, batch_size=args.batch,
                       seed=args.seed, lambda_clst=args.lambda_clst, lambda_sep=args.lambda_sep,
                       d_hidden=args.d_hidden, patch=args.patch, freeze=tuple(args.freeze))


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def cmd_gen_data(args):
    if len(args.norm_range) != 2:
        raise UsageError("--norm-range needs two values", None)
    spec = data.SyntheticSpec(kind=args.kind, n_classes=args.classes, per_class=args.per_class,
                              d_in=args.d_in, zeta=args.zeta, spread=args.spread, noise=args.noise,
                              kappa_gen=args.kappa_gen, norm_range=tuple(args.norm_range), seed=args.seed)
    train_set, test_set = data.generate(spec)
    data.save_embeddings(train_set, _out(args, "train.emb"))
    data.save_embeddings(test_set, _out(args, "test.emb"))
    data.write_stats_csv(train_set, _out(args, "stats.csv"))
    print(f"wrote {len(train_set)} train / {len(test_set)} test records to {args.out}")


def cmd_train(args):
    train_set, test_set = _load_splits(args)
    cfg = _train_config(args, args.formulation)

    def log(row):
        print(f"epoch {row.epoch:4d}  total {row.total:+.5f}  test_acc {row.test_acc:.4f}", flush=True)

    model, report = train(train_set, test_set, cfg, log=log)
    report.write_csv(_out(args, "report.csv"))
    report.write_json(_out(args, "summary.json"))
    save_checkpoint(model, _out(args, "model.ckpt"), tuple(train_set.zeta))
    print(f"final test accuracy {report.final_accuracy:.4f}")


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    dataset = data.load_embeddings(args.data)
    acc = evaluate_top1(model, dataset)
    with open(_out(args, "eval.json"), "w") as fh:
        json.dump({"checkpoint": args.checkpoint, "data": args.data, "top1": acc}, fh, indent=2)
        fh.write("\n")
    print(f"top-1 accuracy {acc:.4f}")


def cmd_sweep(args):
    train_set, test_set = _load_splits(args)
    base = _train_config(args, args.formulation[0])
    res = analysis.run_sweep(args.axis, args.values, base, args.seeds, train_set, test_set,
                             formulations=args.formulation)
    res.write_csv(_out(args, "sweep.csv"))
    res.write_summary_csv(_out(args, "sweep_summary.csv"))
    for f, stats in res.table().items():
        cells = "  ".join(f"{v}:{m:.3f}" for v, m, _ in stats)
        print(f"{f:22s} {cells}  spread {res.spread(f):.3f}")


def cmd_gradcheck(args):
    tags = FORMULATION_TAGS if args.all else args.formulation
    rows = gradcheck.check_all(tags, args.points, args.seed, args.dim, args.step)
    with open(_out(args, "gradcheck.csv"), "w") as fh:
        fh.write("formulation,points,max_rel_error,passed\n")
        for r in rows:
            fh.write(f"{r.tag},{r.points},{r.max_rel_error!r},{int(r.passed)}\n")
    for r in rows:
        print(f"{r.tag:22s} {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in rows) else 2


def _sphere_prototype(args):
    anchor = np.asarray(args.anchor, dtype=np.float64)
    if anchor.shape != (3,):
        raise UsageError("--anchor needs three values", None)
    tag = args.formulation
    if tag == "cosine":
        return CosinePrototype(anchor)
    if tag == "vmf":
        return VMFPrototype.from_kappa(anchor, args.kappa)
    if tag == "fb":
        a1 = anchor / np.linalg.norm(anchor)
        q, _ = np.linalg.qr(np.column_stack([a1, np.eye(3)]))
        axes = q.T[:3] * np.sign(q.T[0] @ a1)
        axes[0] = a1
        return FisherBinghamPrototype.from_kappa(axes, args.kappa, args.beta)
    if tag == "mixture":
        if len(args.mu) != len(args.sigma):
            raise UsageError("mixture needs equally many --mu and --sigma values", None)
        comps = [HyperPGPrototype(anchor, m, float(raw_sigma_for(s)), PdfFamily.TRUNC_GAUSSIAN)
                 for m, s in zip(args.mu, args.sigma)]
        return MixturePrototype(tuple(comps))
    family = {"hyperpg": PdfFamily.GAUSSIAN, "hyperpg-cauchy": PdfFamily.CAUCHY,
              "hyperpg-trunc-gauss": PdfFamily.TRUNC_GAUSSIAN,
              "hyperpg-trunc-cauchy": PdfFamily.TRUNC_CAUCHY}[tag]
    return HyperPGPrototype.from_sigma(anchor, args.mu[0], args.sigma[0], family)


def cmd_sphere(args):
    grid = analysis.sphere_activation_grid(_sphere_prototype(args), args.resolution)
    grid.write_csv(_out(args, "sphere.csv"))
    if args.svg:
        grid.write_svg(_out(args, "sphere.svg"))
    i, j = grid.argmax_cells()[0]
    print(f"max {grid.values[i, j]:.6g} at lat {grid.lat[i]:g}, lon {grid.lon[j]:g}")


def cmd_scatter(args):
    model, _ = load_checkpoint(args.checkpoint)
    rows = analysis.param_scatter(model)
    analysis.write_scatter_csv(rows, _out(args, "scatter.csv"))
    mus = np.array([r[1] for r in rows])
    sig = np.array([r[2] for r in rows])
    print(f"{len(rows)} prototypes  mu {mus.mean():.4f}+-{mus.std():.4f}  sigma {sig.mean():.4f}+-{sig.std():.4f}")


def cmd_nearest(args):
    model, _ = load_checkpoint(args.checkpoint)
    dataset = data.load_embeddings(args.data)
    hits = analysis.nearest_patches(model, dataset, args.proto, args.k)
    with open(_out(args, "nearest.csv"), "w") as fh:
        fh.write("rank,record,row,col,similarity\n")
        for rank, (rec, (r, c), s) in enumerate(hits, 1):
            fh.write(f"{rank},{rec},{r},{c},{s!r}\n")
    for rank, (rec, (r, c), s) in enumerate(hits, 1):
        print(f"{rank:3d}  record {rec:6d}  cell ({r},{c})  similarity {s:.6g}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck, "sphere": cmd_sphere, "scatter": cmd_scatter, "nearest": cmd_nearest,
}


def dispatch(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in COMMANDS:
            sub = parser._subparsers._group_actions[0].choices[argv[0]]
            _apply_config(parser, sub, argv[1:])
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given", parser)
        return COMMANDS[args.command](args) or 0
    except UsageError as exc:
        (exc.parser or parser).print_help(sys.stderr)
        print(f"\nerror: {exc}", file=sys.stderr)
        return 1
    except (ProtoformError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
