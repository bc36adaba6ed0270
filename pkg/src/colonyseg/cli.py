"""Command-line entry point for reproducible generate/train/search/evaluate runs.

Subcommands:
    generate   write a synthetic labeled dataset plus the 80/20 split file
    train      fit one configuration on the train-val split
    search     k-fold CV over a configuration grid, retrain the winner,
               report on the held-out test split
    predict    segment images with a checkpoint: masks, overlays, counts
    evaluate   score predicted masks against a dataset's ground truth
    gradcheck  finite-difference check of every layer kind and both losses

Exit codes: 0 success, 1 usage error, 2 runtime failure.

Run configuration is a flat key=value file ('#' starts a comment);
command-line flags override file values. Keys: depth, batchnorm, loss,
lr, batch_size, max_epochs, patience, seed, image_size, base_channels,
alpha, beta, augment, w_background, w_bvg_plus, w_bvg_minus, w_border.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import dishgen, evalkit, train as training
from .dataset import DatasetStore, sha256_file, write_splits
from .pnm import read_pgm, read_ppm, write_pgm, write_ppm
from .tensor import Tensor, grad_check
from .train import ClassWeights, RunConfig, ce_soft_dice, weighted_ce
from .unet import build_unet, load_weights, predict_mask, save_weights


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


_BOOL_VALUES = {"true": True, "on": True, "1": True, "false": False, "off": False, "0": False}

_CONFIG_KEYS = {
    "depth": int,
    "batchnorm": "bool",
    "loss": str,
    "lr": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "seed": int,
    "image_size": int,
    "base_channels": int,
    "alpha": float,
    "beta": float,
    "augment": "bool",
    "w_background": float,
    "w_bvg_plus": float,
    "w_bvg_minus": float,
    "w_border": float,
}


def _coerce(key: str, raw: str):
    kind = _CONFIG_KEYS[key]
    try:
        if kind == "bool":
            return _BOOL_VALUES[raw.strip().lower()]
        return kind(raw)
    except (ValueError, KeyError):
        raise UsageError(f"invalid value {raw!r} for config key '{key}'") from None


def parse_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Build a RunConfig from a key=value file plus explicit overrides."""
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown config key '{key}'")
            values[key] = _coerce(key, raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _CONFIG_KEYS:
            raise UsageError(f"unknown config key '{key}'")
        values[key] = value

    weights = ClassWeights(
        background=values.pop("w_background", ClassWeights.background),
        bvg_plus=values.pop("w_bvg_plus", ClassWeights.bvg_plus),
        bvg_minus=values.pop("w_bvg_minus", ClassWeights.bvg_minus),
        border=values.pop("w_border", ClassWeights.border),
    )
    try:
        return RunConfig(class_weights=weights, **values)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _config_json(config: RunConfig) -> dict:
    d = dataclasses.asdict(config)
    d["class_weights"] = dataclasses.asdict(config.class_weights)
    return d


def _write_manifest(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def verify_manifest(path) -> None:
    """Check that every artifact an experiment manifest references still matches."""
    manifest = json.loads(Path(path).read_text())
    root = Path(path).parent
    for name, entry in manifest.get("artifacts", {}).items():
        target = root / entry["path"]
        if not target.exists():
            raise FileNotFoundError(f"manifest artifact {name!r} missing: {target}")
        actual = sha256_file(target)
        if actual != entry["sha256"]:
            raise ValueError(f"manifest artifact {name!r} hash mismatch: {target}")


def _artifact_entry(out_dir: Path, path: Path) -> dict:
    return {"path": path.name, "sha256": sha256_file(path)}


def _split_train_val(ids, seed: int, val_fraction: float = 0.2):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    order = rng.permutation(len(ids))
    n_val = max(1, int(round(val_fraction * len(ids))))
    val = [ids[i] for i in order[:n_val]]
    tr = [ids[i] for i in order[n_val:]]
    return tr, val


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_generate(args) -> int:
    params = dishgen.GeneratorParams(
        lambda_plus=args.lambda_plus,
        lambda_minus=args.lambda_minus,
        p_touch=args.p_touch,
        noise_level=args.noise,
        preset=args.preset,
        canvas_size=args.size,
    )
    manifest = dishgen.generate_dataset(params, args.n, args.seed, args.out)
    write_splits(args.out, [e["id"] for e in manifest["images"]], args.seed)
    print(f"wrote {args.n} image/mask/scene triples to {args.out}")
    return 0


def _load_split_samples(store: DatasetStore, which: str):
    splits = store.splits()
    return store.load_samples(splits[which])


def _cmd_train(args) -> int:
    config = parse_config(
        args.config,
        {
            "depth": args.depth,
            "batchnorm": args.batchnorm,
            "loss": args.loss,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "max_epochs": args.max_epochs,
            "patience": args.patience,
            "seed": args.seed,
            "base_channels": args.base_channels,
            "augment": False if args.no_augment else None,
        },
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = DatasetStore(args.data)
    splits = store.splits()
    train_ids, val_ids = _split_train_val(splits["train_val"], config.seed)
    train_set = store.load_samples(train_ids)
    val_set = store.load_samples(val_ids)

    model = build_unet(config.unet_config(), config.seed)
    model, history = training.train(model, train_set, val_set, config)
    if history.stop_reason == "diverged":
        print("training diverged (non-finite loss)", file=sys.stderr)

    ckpt = out / "checkpoint.cseg"
    hist_csv = out / "history.csv"
    save_weights(model, ckpt)
    history.to_csv(hist_csv)
    manifest = {
        "command": "train",
        "config": _config_json(config),
        "dataset_manifest_sha256": store.manifest_sha256,
        "splits": {"train": train_ids, "val": val_ids, "test": splits["test"]},
        "history": {
            "best_epoch": history.best_epoch,
            "epochs": history.num_epochs(),
            "stop_reason": history.stop_reason,
        },
        "artifacts": {
            "checkpoint": _artifact_entry(out, ckpt),
            "history_csv": _artifact_entry(out, hist_csv),
        },
        "read_audit": sorted(set(store.read_log)),
    }
    _write_manifest(out / "manifest.json", manifest)
    best = history.best_epoch
    if history.stop_reason == "diverged" or best is None:
        return 2
    print(
        f"trained {history.num_epochs()} epochs (stop: {history.stop_reason}), "
        f"best epoch {best}, val loss {history.val_loss[best]:.5f}, "
        f"val mAP {history.val_map[best]:.4f}"
    )
    return 0


def _grid_for(name: str, base: RunConfig):
    if name == "default":
        return training.default_grid(base)
    if name == "quick":
        return training.default_grid(
            base, depths=(2,), batchnorm=(False,), losses=("weighted_ce",), lrs=(1e-3,)
        )
    raise UsageError(f"unknown grid '{name}' (use 'default' or 'quick')")


def _cmd_search(args) -> int:
    base = parse_config(args.config, {"seed": args.seed, "max_epochs": args.max_epochs})
    grid = _grid_for(args.grid, base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = DatasetStore(args.data)
    splits = store.splits()
    trainval = store.load_samples(splits["train_val"])

    result = training.grid_search(
        grid, trainval, k=args.folds, seed=base.seed, progress=print
    )
    # Model selection and retraining are done; test files read from here on
    # belong to evaluation only.
    selection_audit = sorted(set(store.read_log))
    if result.best_config is None or result.final_model is None:
        print("every configuration diverged", file=sys.stderr)
        return 2

    rankings = [
        {
            "config": _config_json(e.config),
            "fold_maps": e.fold_maps,
            "fold_best_epochs": e.fold_best_epochs,
            "mean_map": e.mean_map,
            "diverged_folds": e.diverged_folds,
        }
        for e in result.entries
    ]
    with open(out / "rankings.json", "w") as fh:
        json.dump(rankings, fh, indent=2, sort_keys=True)
        fh.write("\n")

    model = result.final_model
    reports = []
    for label, ids in (("training", splits["train_val"]), ("test", splits["test"])):
        samples = store.load_samples(ids) if label == "test" else trainval
        preds = []
        for s in samples:
            probs = model.forward(Tensor(s.image[None]), mode="infer")
            preds.append(predict_mask(probs)[0])
        reports.append(
            evalkit.evaluate_masks(preds, [s.mask for s in samples], ids, label)
        )

    ckpt = out / "checkpoint.cseg"
    save_weights(model, ckpt)
    text = evalkit.write_report(reports, out / "report.json", out / "report.txt")
    manifest = {
        "command": "search",
        "base_config": _config_json(base),
        "grid_size": len(grid),
        "folds": args.folds,
        "best_config": _config_json(result.best_config),
        "final_epochs": result.final_epochs,
        "dataset_manifest_sha256": store.manifest_sha256,
        "splits": splits,
        "artifacts": {
            "checkpoint": _artifact_entry(out, ckpt),
            "rankings": _artifact_entry(out, out / "rankings.json"),
            "report_json": _artifact_entry(out, out / "report.json"),
            "report_text": _artifact_entry(out, out / "report.txt"),
        },
        "read_audit": {
            "selection": selection_audit,
            "full": sorted(set(store.read_log)),
        },
    }
    _write_manifest(out / "manifest.json", manifest)
    print(text, end="")
    return 0


def _cmd_predict(args) -> int:
    model = load_weights(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for image_path in args.images:
        image_path = Path(image_path)
        rgb = read_ppm(image_path)
        x = (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
        probs = model.forward(Tensor(x), mode="infer")
        mask = predict_mask(probs)[0]
        n_plus, n_minus = evalkit.count_colonies(mask)
        stem = image_path.stem
        # image_### inputs keep their dataset id so `evaluate` can pair them.
        tag = stem[len("image_"):] if stem.startswith("image_") else stem
        write_pgm(out / f"mask_{tag}.pgm", mask)
        write_ppm(out / f"overlay_{tag}.ppm", evalkit.render_overlay(rgb, mask))
        counts[image_path.name] = {"bvg_plus": n_plus, "bvg_minus": n_minus}
        print(f"{image_path.name}: {n_plus} bvg+ / {n_minus} bvg- colonies")
    with open(out / "counts.json", "w") as fh:
        json.dump(counts, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_evaluate(args) -> int:
    store = DatasetStore(args.data)
    splits = store.splits()
    ids = splits[args.split] if args.split != "all" else store.ids
    pred_dir = Path(args.pred)
    preds = []
    gts = []
    for sample_id in ids:
        pred_path = pred_dir / f"mask_{sample_id}.pgm"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        preds.append(read_pgm(pred_path))
        gts.append(store.load_mask(sample_id))
    report = evalkit.evaluate_masks(preds, gts, ids, args.split)
    out_json = Path(args.out + ".json")
    out_txt = Path(args.out + ".txt")
    text = evalkit.write_report([report], out_json, out_txt)
    print(text, end="")
    return 0


def _gradcheck_battery(seed: int):
    """(name, GradCheckReport) pairs covering every layer kind and both losses."""
    from .tensor import Graph, Parameter

    rng = np.random.default_rng(seed)
    results = []

    def feed(shape):
        return {"images": rng.normal(size=shape).astype(np.float32)}

    def single(kind, params=None, shape=(2, 3, 8, 8)):
        g = Graph()
        g.add("node", kind, ("images",), params or {})
        return g, feed(shape)

    g, f = single(
        "conv3x3",
        {
            "weight": Parameter(rng.normal(scale=0.5, size=(4, 3, 3, 3)).astype(np.float32)),
            "bias": Parameter(rng.normal(size=4).astype(np.float32)),
        },
    )
    results.append(("conv3x3", grad_check(g, f)))

    g, f = single("maxpool2")
    results.append(("maxpool2", grad_check(g, f)))
    g, f = single("upsample2")
    results.append(("upsample2", grad_check(g, f)))
    g, f = single("relu")
    results.append(("relu", grad_check(g, f)))
    g, f = single(
        "batchnorm",
        {
            "gamma": Parameter(rng.uniform(0.5, 1.5, size=3).astype(np.float32)),
            "beta": Parameter(rng.normal(size=3).astype(np.float32)),
            "running_mean": Parameter(np.zeros(3, np.float32), trainable=False),
            "running_var": Parameter(np.ones(3, np.float32), trainable=False),
        },
    )
    results.append(("batchnorm", grad_check(g, f)))

    g = Graph()
    g.add(
        "c1",
        "conv3x3",
        ("images",),
        {
            "weight": Parameter(rng.normal(scale=0.5, size=(2, 3, 3, 3)).astype(np.float32)),
            "bias": Parameter(np.zeros(2, np.float32)),
        },
    )
    g.add("cat", "concat", ("c1", "c1"))
    results.append(("concat", grad_check(g, feed((2, 3, 8, 8)))))

    g, f = single("softmax_channels", shape=(2, 4, 8, 8))
    results.append(("softmax_channels", grad_check(g, f)))

    # Tiny full network with each loss attached at the logits.
    from .unet import UNetConfig

    for loss_name in ("weighted_ce", "ce_soft_dice"):
        model = build_unet(UNetConfig(depth=2, base_channels=4, batchnorm=True), seed)
        labels = rng.integers(0, 4, size=(1, 8, 8))

        def loss_fn(out, labels=labels, loss_name=loss_name):
            if loss_name == "weighted_ce":
                loss, grad = weighted_ce(out, labels)
            else:
                loss, grad = ce_soft_dice(out, labels, 1.0, 1.0)
            return loss, grad.data

        f = {"images": rng.normal(size=(1, 3, 8, 8)).astype(np.float32)}
        report = grad_check(
            model.graph,
            f,
            loss_fn=loss_fn,
            inject_at="head.conv",
            max_entries=40,
            seed=seed,
        )
        results.append((f"unet+{loss_name}", report))
    return results


def _cmd_gradcheck(args) -> int:
    results = _gradcheck_battery(args.seed)
    worst = 0.0
    ok = True
    for name, report in results:
        status = "pass" if report.passed else "FAIL"
        print(f"{name:<20} max rel err {report.max_rel_error:.3e}  {status}")
        worst = max(worst, report.max_rel_error)
        ok = ok and report.passed
    print(f"overall max relative error: {worst:.3e}")
    if not ok:
        print("gradient check failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="colonyseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labeled dataset")
    p.add_argument("--n", type=int, default=108)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--preset", choices=dishgen.PRESETS, default="realistic")
    p.add_argument("--lambda-plus", type=float, default=20.357)
    p.add_argument("--lambda-minus", type=float, default=4.726)
    p.add_argument("--p-touch", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=3.0)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--batchnorm", type=lambda s: _coerce("batchnorm", s), default=None)
    p.add_argument("--loss", choices=training.LOSS_KINDS, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("search", help="grid search with k-fold CV, then test report")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--grid", default="default")
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.set_defaults(func=_cmd_search)

    p = sub.add_parser("predict", help="segment and count images with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train_val", "test", "all"), default="test")
    p.add_argument("--out", default="report")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def run(argv) -> int:
    """Execute one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
