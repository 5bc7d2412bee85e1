"""Command-line entry point.

Every command writes into a run directory given by ``--out`` and leaves a
``manifest.json`` there with the command line, resolved settings and input
digests.  Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numerical
abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import load_checkpoint, save_checkpoint, shared_features
from .data import (DROPPED, SPLIT_NAMES, TEST, FeatureStore, InteractionDataset, load_feature_store,
                   load_interactions, load_item_list, random_split, save_interactions,
                   save_item_list, write_features_binary)
from .errors import DataError, NumericalError
from .mask import append_mask_tsv
from .metrics import evaluate_topk
from .rng import fnv1a64
from .shift import (SyntheticSpec, build_ood_split, estimate_match_prob, gen_synthetic,
                    mix_datasets, train_match_classifier, write_provenance)
from .trainer import TrainConfig, fit

logger = logging.getLogger("modest")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- small helpers -----------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _feature_arg(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected MODALITY=PATH, got {text!r}")
    return name, path


def digest(path) -> str:
    return f"{fnv1a64(Path(path).read_bytes()):016x}"


def write_manifest(out: Path, command: str, argv, config: dict, seed, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": {str(p): digest(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="interaction TSV (user, item[, split])")
    p.add_argument("--items", help="item list fixing item order (and binary feature row order)")
    p.add_argument("--features", type=_feature_arg, action="append", default=[],
                   metavar="MODALITY=PATH", help="feature file per modality (repeatable)")


def load_data(args, need_features: bool) -> tuple[InteractionDataset, FeatureStore | None, list]:
    inputs = [args.data]
    item_order = None
    if args.items:
        item_order = load_item_list(args.items)
        inputs.append(args.items)
    ds = load_interactions(args.data, item_order=item_order)
    store = None
    if need_features:
        if not args.features:
            raise DataError("vbpr needs item features; pass --features MODALITY=PATH")
        paths = dict(args.features)
        store = load_feature_store(paths, ds, row_ids=item_order)
        inputs.extend(paths.values())
    return ds, store, inputs


# -- gen-synthetic -----------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(num_users=args.num_users, num_items=args.num_items,
                         dims=(args.dim_v, args.dim_t), rho_train=args.rho_train,
                         rho_test=args.rho_test, interactions_per_user=args.interactions_per_user,
                         shift_fraction=args.shift_fraction, cold_shift=args.cold_shift,
                         noise=tuple(args.noise), seed=args.seed)
    data = gen_synthetic(spec)
    out = _out_dir(args.out)
    outputs = [out / "interactions.tsv", out / "items.tsv", out / "spec.toml", out / "shifted.tsv"]
    save_interactions(data.dataset, outputs[0])
    save_item_list(data.dataset, outputs[1])
    write_provenance(spec, outputs[2])
    with outputs[3].open("w", encoding="utf-8", newline="\n") as fh:
        for iid, s in zip(data.dataset.item_ids, data.shifted):
            fh.write(f"{iid}\t{int(s)}\n")
    for m, mat in zip(data.features.modalities, data.features.matrices):
        path = out / f"features_{m}.mdft"
        write_features_binary(path, mat)
        outputs.append(path)
    # keep the OOD test subset (shifted items only) next to the full data
    ds = data.dataset
    ood = ds.with_split(np.where((ds.split == TEST) & ~data.shifted[ds.items], DROPPED, ds.split))
    iid = ds.with_split(np.where((ds.split == TEST) & data.shifted[ds.items], DROPPED, ds.split))
    save_interactions(ood, out / "ood_truth.tsv")
    save_interactions(iid, out / "iid_truth.tsv")
    outputs += [out / "ood_truth.tsv", out / "iid_truth.tsv"]
    write_manifest(out, "gen-synthetic", args.argv, dataclasses.asdict(spec), spec.seed, [], outputs)
    counts = data.dataset.counts()
    print(f"users={spec.num_users} items={spec.num_items} interactions={len(data.dataset)} "
          f"train={counts['train']} valid={counts['valid']} test={counts['test']} "
          f"shifted_items={int(data.shifted.sum())}")
    return EXIT_OK


# -- split / ood-split / mix ---------------------------------------------------

def cmd_split(args) -> int:
    if len(args.ratios) != 3:
        raise ConfigError("--ratios needs three values")
    ds = load_interactions(args.data)
    ds = random_split(ds, tuple(args.ratios), args.seed)
    out = _out_dir(args.out)
    path = out / "interactions.tsv"
    save_interactions(ds, path)
    write_manifest(out, "split", args.argv, {"ratios": args.ratios}, args.seed, [args.data], [path])
    c = ds.counts()
    print(f"train={c['train']} valid={c['valid']} test={c['test']}")
    return EXIT_OK


def cmd_ood_split(args) -> int:
    if not 0 < args.fraction <= 1:
        raise ConfigError("--fraction must be in (0, 1]")
    ds, store, inputs = load_data(args, need_features=True)
    clf = train_match_classifier(store, epochs=args.epochs, seed=args.seed)
    probs = estimate_match_prob(clf, store)
    ood = build_ood_split(ds, fraction=args.fraction, mode=args.mode, probs=probs)
    out = _out_dir(args.out)
    split_path, prob_path = out / "ood_split.tsv", out / "match_prob.tsv"
    save_interactions(ood, split_path)
    with prob_path.open("w", encoding="utf-8", newline="\n") as fh:
        for iid, p in zip(ds.item_ids, probs):
            fh.write(f"{iid}\t{float(p)!r}\n")
    config = {"fraction": args.fraction, "mode": args.mode, "epochs": args.epochs}
    write_manifest(out, "ood-split", args.argv, config, args.seed, inputs, [split_path, prob_path])
    print(f"kept test interactions={ood.counts()['test']} of {ds.counts()['test']} ({args.mode})")
    return EXIT_OK


def cmd_mix(args) -> int:
    for r in (args.ratios_a, args.ratios_b):
        if len(r) != 3:
            raise ConfigError("ratios need three values")
    order_a = load_item_list(args.items_a) if args.items_a else None
    order_b = load_item_list(args.items_b) if args.items_b else None
    ds_a = load_interactions(args.data_a, item_order=order_a)
    ds_b = load_interactions(args.data_b, item_order=order_b)
    inputs = [p for p in (args.data_a, args.data_b, args.items_a, args.items_b) if p]
    store_a = store_b = None
    if args.features_a or args.features_b:
        if not (args.features_a and args.features_b):
            raise DataError("features must be given for both datasets or neither")
        store_a = load_feature_store(dict(args.features_a), ds_a, order_a)
        store_b = load_feature_store(dict(args.features_b), ds_b, order_b)
        inputs += [p for _, p in args.features_a + args.features_b]
    mixed, store = mix_datasets(ds_a, ds_b, tuple(args.ratios_a), tuple(args.ratios_b),
                                args.seed, store_a, store_b)
    out = _out_dir(args.out)
    outputs = [out / "interactions.tsv", out / "items.tsv"]
    save_interactions(mixed, outputs[0])
    save_item_list(mixed, outputs[1])
    if store is not None:
        for m, mat in zip(store.modalities, store.matrices):
            outputs.append(out / f"features_{m}.mdft")
            write_features_binary(outputs[-1], mat)
    config = {"ratios_a": args.ratios_a, "ratios_b": args.ratios_b}
    write_manifest(out, "mix", args.argv, config, args.seed, inputs, outputs)
    c = mixed.counts()
    print(f"users={mixed.num_users} items={mixed.num_items} train={c['train']} "
          f"valid={c['valid']} test={c['test']}")
    return EXIT_OK


# -- train / sweep -------------------------------------------------------------

CONFIG_FLAGS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file")
    for name, f in CONFIG_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        kind = {"int": int, "float": float}.get(f.type, str)
        aliases = [flag]
        if name == "lam":
            aliases = ["--lambda", flag]
        p.add_argument(*aliases, dest=f"cfg_{name}", type=kind, default=argparse.SUPPRESS,
                       metavar=name.upper())


def resolve_config(args, **overrides) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    try:
        config = TrainConfig()
        if getattr(args, "config", None):
            config = TrainConfig.from_file(args.config, config)
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
        flags.update(overrides)
        return TrainConfig.from_mapping(flags, config)
    except (KeyError, ValueError, OSError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc


def write_train_outputs(out: Path, ds: InteractionDataset, result, config: TrainConfig) -> list[Path]:
    paths = [out / "checkpoint.mdck", out / "train_log.tsv", out / "sample_weights.tsv",
             out / "config.txt", out / "users.tsv", out / "items.tsv"]
    save_checkpoint(result.params, paths[0])
    with paths[1].open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(result.reports[0].TSV_FIELDS) + "\n")
        for r in result.reports:
            fh.write(r.tsv_row() + "\n")
    weights = result.weights.values
    with paths[2].open("w", encoding="utf-8", newline="\n") as fh:
        for iid, w in zip(ds.item_ids, weights):
            fh.write(f"{iid}\t{float(w)!r}\n")
    paths[3].write_text(config.to_text(), encoding="utf-8")
    paths[4].write_text("".join(u + "\n" for u in ds.user_ids), encoding="utf-8")
    save_item_list(ds, paths[5])
    return paths


def _run_fit(ds, store, config, out: Path, dump_mask: bool):
    mask_path = out / "mask.tsv"
    if dump_mask and mask_path.exists():
        mask_path.unlink()

    def on_epoch(report, mask):
        print(f"epoch {report.epoch:3d}  loss {report.weighted_bpr_loss:.5f}  "
              f"hsic {report.hsic_loss:.5g}  valid R@{config.eval_k} {report.valid_recall:.4f}",
              flush=True)
        if dump_mask and mask is not None:
            append_mask_tsv(mask_path, report.epoch, mask)

    result = fit(ds, store, config, on_epoch)
    extra = [mask_path] if dump_mask and mask_path.exists() else []
    return result, extra


def cmd_train(args) -> int:
    config = resolve_config(args)
    ds, store, inputs = load_data(args, need_features=config.model == "vbpr")
    out = _out_dir(args.out)
    result, extra = _run_fit(ds, store, config, out, args.dump_mask)
    outputs = write_train_outputs(out, ds, result, config) + extra
    if args.config:
        inputs.append(args.config)
    write_manifest(out, "train", args.argv, dataclasses.asdict(config), config.seed, inputs, outputs)
    print(f"best epoch {result.best_epoch} of {len(result.reports)}; "
          f"valid R@{config.eval_k} {result.reports[result.best_epoch - 1].valid_recall:.4f}")
    return EXIT_OK


SWEEP_FIELDS = ("lambda", "status", "best_epoch", "epochs", "valid_recall", "test_recall",
                "test_ndcg", "test_precision", "weight_median", "weight_std")


def cmd_sweep_lambda(args) -> int:
    base = resolve_config(args)
    if not args.lambdas:
        raise ConfigError("--lambdas is empty")
    if any(lam < 0 for lam in args.lambdas):
        raise ConfigError("lambda values must be >= 0")
    ds, store, inputs = load_data(args, need_features=base.model == "vbpr")
    test_ds = ds
    if args.test_data:
        test_ds = load_interactions(args.test_data, item_order=list(ds.item_ids))
        if test_ds.user_ids != ds.user_ids:
            raise DataError("--test-data must list the same users in the same order as --data")
        inputs.append(args.test_data)
    out = _out_dir(args.out)
    rows, outputs = [], []
    for lam in args.lambdas:
        config = dataclasses.replace(base, lam=lam)
        run_dir = _out_dir(out / f"lambda_{lam:g}")
        print(f"== lambda {lam:g}", flush=True)
        try:
            result, extra = _run_fit(ds, store, config, run_dir, False)
        except (DataError, NumericalError, ValueError) as exc:
            logger.error("lambda %g failed: %s", lam, exc)
            rows.append([f"{lam:g}", f"error:{type(exc).__name__}"] + ["nan"] * (len(SWEEP_FIELDS) - 2))
            continue
        outputs += write_train_outputs(run_dir, ds, result, config) + extra
        shared = shared_features(result.params, store if config.model == "vbpr" else None)
        rep = evaluate_topk(result.params, shared, test_ds, "test", config.eval_k, config.eval_exclude)
        w = result.weights.values[ds.train_items]
        best = result.reports[result.best_epoch - 1]
        rows.append([f"{lam:g}", "ok", str(result.best_epoch), str(len(result.reports)),
                     repr(best.valid_recall), repr(rep.recall), repr(rep.ndcg), repr(rep.precision),
                     repr(float(np.median(w))), repr(float(w.std()))])
    sweep = out / "sweep.tsv"
    with sweep.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SWEEP_FIELDS) + "\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    outputs.append(sweep)
    cfg = dataclasses.asdict(base)
    cfg["lambdas"] = args.lambdas
    write_manifest(out, "sweep-lambda", args.argv, cfg, base.seed, inputs, outputs)
    print(f"{'lambda':>8}  {'status':<8}  R@{base.eval_k:<6}  N@{base.eval_k}")
    for r in rows:
        rec = float(r[5])
        ndcg = float(r[6])
        print(f"{r[0]:>8}  {r[1]:<8}  {rec:.4f}    {ndcg:.4f}")
    return EXIT_OK if all(r[1] == "ok" for r in rows) else EXIT_NUMERICAL


# -- eval ----------------------------------------------------------------------

def _check_ids(path: Path, ids, what: str) -> None:
    if path.exists():
        saved = tuple(line.rstrip("\n") for line in path.read_text(encoding="utf-8").splitlines())
        if saved != tuple(ids):
            raise DataError(f"{what} in the data do not match the checkpoint's run ({path})")


def cmd_eval(args) -> int:
    if any(k < 1 for k in args.k) or not args.k:
        raise ConfigError("K values must be positive integers")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    params = load_checkpoint(ckpt)
    ds, store, inputs = load_data(args, need_features=params.model == "vbpr")
    if (ds.num_users, ds.num_items) != (params.num_users, params.num_items):
        raise DataError(f"checkpoint is for {params.num_users} users / {params.num_items} items, "
                        f"data has {ds.num_users} / {ds.num_items}")
    _check_ids(ckpt.parent / "users.tsv", ds.user_ids, "users")
    _check_ids(ckpt.parent / "items.tsv", ds.item_ids, "items")
    params.check(store)
    shared = shared_features(params, store)
    reports = evaluate_topk(params, shared, ds, args.split, list(args.k), args.exclude, args.per_user)
    out = _out_dir(args.out)
    metrics_path = out / "metrics.tsv"
    outputs = [metrics_path]
    with metrics_path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("split\tk\trecall\tndcg\tprecision\tusers\n")
        for k, r in reports.items():
            fh.write(f"{args.split}\t{k}\t{r.recall!r}\t{r.ndcg!r}\t{r.precision!r}\t{r.num_users}\n")
    if args.per_user:
        path = out / "per_user.tsv"
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("user_id\tk\trecall\tndcg\tprecision\n")
            for k, r in reports.items():
                pu = r.per_user
                for j, u in enumerate(pu["user"]):
                    fh.write(f"{ds.user_ids[u]}\t{k}\t{pu['recall'][j]!r}\t{pu['ndcg'][j]!r}\t"
                             f"{pu['precision'][j]!r}\n")
        outputs.append(path)
    config = {"split": args.split, "k": list(args.k), "exclude": args.exclude}
    write_manifest(out, "eval", args.argv, config, None, inputs + [str(ckpt)], outputs)
    print(f"{'K':>4}  {'Recall':>8}  {'NDCG':>8}  {'Precision':>9}   ({args.split}, "
          f"{next(iter(reports.values())).num_users} users)")
    for k, r in reports.items():
        print(f"{k:>4}  {r.recall:8.4f}  {r.ndcg:8.4f}  {r.precision:9.4f}")
    return EXIT_OK


# -- weights-hist --------------------------------------------------------------

def read_weights(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"weights file not found: {path}")
    ids, vals = [], []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        try:
            ids.append(cols[0])
            vals.append(float(cols[1]))
        except (IndexError, ValueError):
            raise DataError(f"{path}:{line_no}: expected item_id<TAB>weight")
    if not vals:
        raise DataError(f"{path}: no weights")
    return ids, np.array(vals)


def weight_histogram(weights: np.ndarray, w_max: float, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    edges = np.linspace(0.0, w_max, bins + 1)
    counts, _ = np.histogram(np.clip(weights, 0.0, w_max), bins=edges)
    return edges, counts


def cmd_weights_hist(args) -> int:
    if args.bins < 1 or args.w_max <= 0:
        raise ConfigError("--bins and --w-max must be positive")
    ids, w = read_weights(args.weights)
    if args.items_with:
        keep = set(load_item_list(args.items_with))
        sel = np.array([i in keep for i in ids])
        w = w[sel]
    edges, counts = weight_histogram(w, args.w_max, args.bins)
    out = _out_dir(args.out)
    path = out / "weights_hist.tsv"
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("lo\thi\tcount\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            fh.write(f"{lo!r}\t{hi!r}\t{int(c)}\n")
    inputs = [args.weights] + ([args.items_with] if args.items_with else [])
    write_manifest(out, "weights-hist", args.argv, {"bins": args.bins, "w_max": args.w_max},
                   None, inputs, [path])
    peak = max(int(counts.max()), 1)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        bar = "#" * int(math.ceil(40 * c / peak)) if c else ""
        print(f"[{lo:5.2f}, {hi:5.2f})  {int(c):7d}  {bar}")
    print(f"n={len(w)} median={float(np.median(w)):.4f} std={float(w.std()):.4f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="modest", description="Modality-decorrelating sample reweighting "
                     "for multimodal recommenders.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a synthetic two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-users", type=int, default=2000)
    p.add_argument("--num-items", type=int, default=1000)
    p.add_argument("--dim-v", type=int, default=32)
    p.add_argument("--dim-t", type=int, default=32)
    p.add_argument("--rho-train", type=float, default=0.9)
    p.add_argument("--rho-test", type=float, default=0.0)
    p.add_argument("--interactions-per-user", type=int, default=SyntheticSpec.interactions_per_user)
    p.add_argument("--shift-fraction", type=float, default=0.2)
    p.add_argument("--noise", type=_floats, default=list(SyntheticSpec.noise))
    p.add_argument("--cold-shift", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("split", help="random per-user train/valid/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=_floats, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("ood-split", help="keep test items by modality-match probability")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--mode", choices=("lowest", "highest"), default="lowest")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ood_split)

    p = sub.add_parser("mix", help="mix two datasets at different split ratios")
    p.add_argument("--data-a", required=True)
    p.add_argument("--data-b", required=True)
    p.add_argument("--items-a")
    p.add_argument("--items-b")
    p.add_argument("--features-a", type=_feature_arg, action="append", default=[])
    p.add_argument("--features-b", type=_feature_arg, action="append", default=[])
    p.add_argument("--ratios-a", type=_floats, default=[0.8, 0.1, 0.1])
    p.add_argument("--ratios-b", type=_floats, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("train", help="fit a backbone with sample reweighting")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-mask", action="store_true", help="append per-epoch masks to mask.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking top-K metrics for a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLIT_NAMES[:3], default="test")
    p.add_argument("--k", type=_ints, default=[10, 20])
    p.add_argument("--exclude", choices=("none", "train", "train+valid"), default="train")
    p.add_argument("--per-user", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="one training run per lambda value")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--lambdas", type=_floats, default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5])
    p.add_argument("--test-data", help="split file whose test rows are used for the sweep metrics")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("weights-hist", help="histogram of learned sample weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--items-with", help="restrict to the item ids listed in this file")
    p.add_argument("--w-max", type=float, default=2.0)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_weights_hist)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("modest: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as exc:
        print(f"modest: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"modest: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError, ValueError) as exc:
        print(f"modest: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
