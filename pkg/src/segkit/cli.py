"""Command-line entry points: train, predict, evaluate, gendata, degrade, scribble.

Exit codes: 0 success, 1 user error (bad config, missing file, bad usage),
2 unexpected internal error. The environment variable SEGKIT_OUTPUT_ROOT,
when set, is prepended to every relative output location (checkpoint_dir,
prediction output_dir, metrics output_csv) so runs can be redirected
without editing configs.
"""

import argparse
import csv
import os
import sys

import numpy as np

from .config import parse_config
from .errors import ConfigError, MissingFileError, SegkitUserError
from .infer import ensemble_infer, largest_component_postprocess, tta_infer
from .metrics import evaluate_cases, write_csv
from .nets import build_network, load_checkpoint
from .transforms import build_pipeline
from .volio.batches import IndexedDataset
from .volio.volume import Volume, load_volume, parse_index, save_volume

OUTPUT_ROOT_ENV = "SEGKIT_OUTPUT_ROOT"


def _output_path(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _dataset(config, csv_key, transform_key, seed=0):
    ds = config.sections["dataset"]
    if ds[csv_key] is None:
        raise ConfigError(f"[dataset] {csv_key} is required for this command")
    pipeline = build_pipeline(ds[transform_key], config.transform_params())
    return IndexedDataset.from_csv(
        ds["root_dir"],
        config.resolve_path(ds[csv_key]),
        transforms=pipeline,
        cache=ds["cache"],
        seed=seed,
    )


def cmd_train(config_path):
    """Train per the config; prints the final/best validation score."""
    from .agents import run_training

    config = parse_config(config_path)
    agent = config.to_agent_config()
    agent.checkpoint_dir = _output_path(agent.checkpoint_dir)
    seed = agent.seed
    datasets = {"train": _dataset(config, "train_csv", "transforms", seed=seed + 11)}
    ds = config.sections["dataset"]
    if ds["valid_csv"] is not None:
        datasets["valid"] = _dataset(config, "valid_csv", "test_transforms", seed=seed + 12)
    if ds["unlabeled_csv"] is not None:
        datasets["unlabeled"] = _dataset(
            config, "unlabeled_csv", "transforms", seed=seed + 13
        )
    state = run_training(agent, datasets)
    print(f"trained {agent.paradigm} for {state.iteration} iterations")
    if state.val_trace:
        print(f"best validation dice {state.best_metric:.4f} at {state.best_checkpoint or 'memory'}")
        for it, score in state.val_trace:
            print(f"  iter {it}: val dice {score:.4f}")
    return 0


def _load_members(config, agent):
    """Networks for prediction: one per configured checkpoint path."""
    spec = None
    from .agents import resolve_network_spec

    spec = resolve_network_spec(agent)
    infer_spec = config.to_infer_spec()
    paths = list(infer_spec.checkpoints)
    if not paths:
        default = os.path.join(_output_path(agent.checkpoint_dir), "best.ckpt")
        paths = [default]
    members = []
    for path in paths:
        full = path if os.path.isabs(path) else _output_path(path)
        if not os.path.isfile(full):
            raise MissingFileError(
                f"checkpoint not found: {full} (train first, or set [testing] checkpoint)"
            )
        net = build_network(spec, seed=0)
        load_checkpoint(full, net=net)
        net.eval()
        members.append(net)
    return members, infer_spec


def cmd_predict(config_path):
    """Run inference over the test index and write label volumes."""
    config = parse_config(config_path)
    agent = config.to_agent_config()
    members, infer_spec = _load_members(config, agent)
    test_set = _dataset(config, "test_csv", "test_transforms", seed=701)
    te = config.sections["testing"]
    out_dir = _output_path(te["output_dir"])
    os.makedirs(out_dir, exist_ok=True)

    for i in range(len(test_set)):
        sample = test_set.raw_sample(i)
        if len(members) == 1:
            probs = tta_infer(members[0], sample.image, infer_spec)
        else:
            probs = ensemble_infer(members, sample.image, infer_spec)
        pred = probs.argmax(axis=0).astype(np.uint8)
        if te["post_process"] == "largest_component":
            pred = largest_component_postprocess(pred, per_class=True)
        elif te["post_process"] == "largest_component_global":
            pred = largest_component_postprocess(pred, per_class=False)
        rel_image = test_set.records[i][0]
        name = os.path.basename(rel_image)
        # keep the source geometry so evaluation lines up with ground truth
        original = load_volume(
            os.path.join(config.sections["dataset"]["root_dir"], rel_image)
        )
        save_volume(
            Volume(pred[None].astype(np.uint8), is_label=True),
            os.path.join(out_dir, name),
            reference_meta=original,
        )
        print(f"predicted {name}")
    print(f"wrote {len(test_set)} predictions to {out_dir}")
    return 0


def cmd_evaluate(config_path):
    """Compare predictions with ground truth and write the metric CSV."""
    config = parse_config(config_path)
    ev = config.sections["evaluation"]
    gt_dir = ev["gt_dir"]
    if gt_dir is None:
        raise ConfigError("[evaluation] gt_dir is required for evaluate")
    pred_dir = ev["pred_dir"] or _output_path(config.sections["testing"]["output_dir"])
    classes = ev["classes"]
    if classes is None:
        k = config.sections["network"]["num_classes"]
        classes = tuple(range(1, k))
    # when a test index is configured, score exactly that split
    cases = None
    ds = config.sections["dataset"]
    if ds["test_csv"] is not None:
        records = parse_index(config.resolve_path(ds["test_csv"]))
        cases = [os.path.basename(image_rel) for image_rel, _ in records]
    report = evaluate_cases(
        pred_dir,
        config.resolve_path(gt_dir),
        classes=classes,
        metric_names=ev["metrics"],
        cases=cases,
    )
    out_csv = _output_path(ev["output_csv"])
    parent = os.path.dirname(out_csv)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_csv(report, out_csv)
    for case, cls, metric, value in report.summary:
        if case == "mean" and value is not None:
            print(f"class {cls} {metric}: mean {value:.4f}")
    print(f"wrote {out_csv}")
    return 0


def cmd_gendata(args):
    from .synth import gen_synthetic_dataset

    size = args.size[0] if len(args.size) == 1 else tuple(args.size)
    paths = gen_synthetic_dataset(
        n_cases=args.cases,
        size=size,
        n_classes=args.classes,
        seed=args.seed,
        out_dir=args.out,
    )
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def _read_label(root, rel):
    vol = load_volume(os.path.join(root, rel), is_label=True)
    data = np.asarray(vol.data)
    return vol, data[0] if data.shape[0] == 1 else data


def cmd_degrade(args):
    """Corrupt a fraction of the indexed labels and emit a new index CSV."""
    from .synth import degrade_labels

    records = parse_index(args.index)
    rng = np.random.default_rng(args.seed)
    n_noisy = int(round(args.fraction * len(records)))
    noisy_idx = set(rng.choice(len(records), size=n_noisy, replace=False).tolist())
    modes = args.modes.split(",")
    os.makedirs(os.path.join(args.root, args.out), exist_ok=True)

    out_rows = []
    for i, (image_rel, label_rel) in enumerate(records):
        if label_rel is None:
            raise SegkitUserError(f"row {i + 1} of {args.index} has no label to degrade")
        if i not in noisy_idx:
            out_rows.append((image_rel, label_rel))
            continue
        vol, label = _read_label(args.root, label_rel)
        mode = modes[int(rng.integers(len(modes)))]
        magnitude = int(rng.integers(args.min_magnitude, args.max_magnitude + 1))
        noisy = degrade_labels(label, mode, magnitude, seed=int(rng.integers(2**31)))
        name = os.path.basename(label_rel)
        rel_out = f"{args.out}/{name}"
        save_volume(
            Volume(noisy[None].astype(label.dtype), is_label=True),
            os.path.join(args.root, rel_out),
            reference_meta=vol,
        )
        out_rows.append((image_rel, rel_out))
    _write_index(os.path.join(args.root, args.out_csv), out_rows)
    print(f"degraded {n_noisy}/{len(records)} labels -> {args.out_csv}")
    return 0


def cmd_scribble(args):
    """Reduce every indexed dense label to scribbles; emit a new index CSV."""
    from .synth import extract_scribbles

    records = parse_index(args.index)
    rng = np.random.default_rng(args.seed)
    ignore = args.ignore
    if ignore is None:
        # one consistent ignore id across the dataset: global max class + 1
        peak = 0
        for _, label_rel in records:
            if label_rel is None:
                raise SegkitUserError("every row needs a label to scribble")
            _, label = _read_label(args.root, label_rel)
            peak = max(peak, int(label.max()))
        ignore = peak + 1
    os.makedirs(os.path.join(args.root, args.out), exist_ok=True)

    out_rows = []
    for image_rel, label_rel in records:
        vol, label = _read_label(args.root, label_rel)
        scribble = extract_scribbles(
            label, seed=int(rng.integers(2**31)), ignore_value=ignore
        )
        name = os.path.basename(label_rel)
        rel_out = f"{args.out}/{name}"
        save_volume(
            Volume(scribble[None].astype(np.uint8), is_label=True),
            os.path.join(args.root, rel_out),
            reference_meta=vol,
        )
        out_rows.append((image_rel, rel_out))
    _write_index(os.path.join(args.root, args.out_csv), out_rows)
    print(f"scribbled {len(records)} labels (ignore={ignore}) -> {args.out_csv}")
    return 0


def _write_index(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "label"])
        writer.writerows(rows)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="segkit",
        description="Config-driven medical image segmentation under "
        "full, partial, sparse, or noisy supervision.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in (
        ("train", "train a model from a config file"),
        ("predict", "write predictions for the test index"),
        ("evaluate", "score predictions against ground truth"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("config", help="path to the INI config")

    g = sub.add_parser("gendata", help="generate a synthetic phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--size", type=int, nargs="+", default=[64])
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("degrade", help="corrupt labels for noisy-label runs")
    d.add_argument("--index", required=True, help="input index CSV")
    d.add_argument("--root", default=".", help="directory paths are relative to")
    d.add_argument("--out", default="labels_noisy", help="output label dir (under root)")
    d.add_argument("--out-csv", default="train_noisy.csv")
    d.add_argument("--modes", default="dilate,erode,edge_distort")
    d.add_argument("--min-magnitude", type=int, default=1)
    d.add_argument("--max-magnitude", type=int, default=3)
    d.add_argument("--fraction", type=float, default=0.9)
    d.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("scribble", help="reduce dense labels to scribbles")
    s.add_argument("--index", required=True)
    s.add_argument("--root", default=".")
    s.add_argument("--out", default="labels_scribble")
    s.add_argument("--out-csv", default="train_scribble.csv")
    s.add_argument("--ignore", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "predict":
            return cmd_predict(args.config)
        if args.command == "evaluate":
            return cmd_evaluate(args.config)
        if args.command == "gendata":
            return cmd_gendata(args)
        if args.command == "degrade":
            return cmd_degrade(args)
        if args.command == "scribble":
            return cmd_scribble(args)
        parser.error(f"unknown command {args.command}")
    except SegkitUserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
