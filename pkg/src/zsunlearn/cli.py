"""Command-line interface.

Verbs: data inspect, train, unlearn minmax|gkt, eval ain, attack invert|mia,
sweep, report. The data root for the on-disk benchmark datasets comes from
--data-root or the ZSU_DATA_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attacks, gkt, harness, metrics, minmax
from .data import load_dataset, partition, read_descriptor, write_descriptor
from .models import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train_classifier


def _parse_classes(text: str) -> tuple:
    return tuple(int(c) for c in text.split(",") if c != "")


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def cmd_data_inspect(args) -> int:
    if os.path.isfile(args.path) and args.path.endswith(".json"):
        desc = read_descriptor(args.path)
        counts = desc["class_counts"]
        print(f"{desc['name']} [{desc['split_tag']}] "
              f"{desc['num_samples']} samples, shape {tuple(desc['image_shape'])}, "
              f"range {tuple(desc['value_range'])}")
    else:
        ds = load_dataset(args.path, args.split, root=args.data_root)
        counts = ds.class_counts().tolist()
        print(f"{ds.name} [{ds.split_tag}] {len(ds)} samples, "
              f"shape {ds.image_shape}, range {ds.value_range}")
        if args.descriptor:
            write_descriptor(ds, args.descriptor)
            print(f"descriptor written to {args.descriptor}")
    width = max(counts) or 1
    for class_id, n in enumerate(counts):
        bar = "#" * max(1, round(40 * n / width)) if n else ""
        print(f"  class {class_id:>2}: {n:>7}  {bar}")
    return 0


def cmd_train(args) -> int:
    train_data = load_dataset(args.dataset, "train", root=args.data_root)
    test_data = load_dataset(args.dataset, "test", root=args.data_root)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      lr=args.lr, seed=args.seed)
    if args.forget:
        retain = partition(train_data, _parse_classes(args.forget)).retain_view
        bundle = train_classifier(retain, args.arch, cfg, eval_data=test_data,
                                  provenance="retrained")
    else:
        bundle = train_classifier(train_data, args.arch, cfg, eval_data=test_data)
    save_checkpoint(bundle, args.out)
    meta = bundle.training_meta
    print(f"saved {args.out}: train acc {meta['train_accuracy']:.2f}%, "
          f"test acc {meta.get('test_accuracy', float('nan')):.2f}%")
    return 0


def _emit_unlearn_outputs(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    harness.save_report(report, os.path.join(out_dir, "report.json"))
    metrics.write_report_csv([report], os.path.join(out_dir, "report.csv"))
    print(harness.emit_results_table([report], os.path.join(out_dir, "report.csv")))


def cmd_unlearn_minmax(args) -> int:
    model = load_checkpoint(args.model)
    test_part = partition(load_dataset(args.dataset, "test", root=args.data_root),
                          _parse_classes(args.forget))
    overrides = _load_json_config(args.config)
    cfg = minmax.MinMaxConfig(**{**overrides, "seed": args.seed})
    unlearned, report = minmax.run_minmax(model, test_part, cfg)
    save_checkpoint(unlearned, os.path.join(args.out, "unlearned.ckpt")
                    if os.path.isdir(args.out) or not args.out.endswith(".ckpt")
                    else args.out)
    _emit_unlearn_outputs(report, args.out if not args.out.endswith(".ckpt")
                          else os.path.dirname(args.out) or ".")
    return 0


def cmd_unlearn_gkt(args) -> int:
    teacher = load_checkpoint(args.teacher)
    test_part = partition(load_dataset(args.dataset, "test", root=args.data_root),
                          _parse_classes(args.forget))
    overrides = _load_json_config(args.config)
    overrides.update({k: v for k, v in [
        ("epochs", args.epochs), ("filter_threshold", args.epsilon),
        ("attention_weight", args.beta), ("temperature", args.temperature),
        ("divergence", args.divergence)] if v is not None})
    cfg = gkt.GKTConfig(**{**overrides, "seed": args.seed})
    unlearned, state, report = gkt.run_gkt(teacher, test_part, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(unlearned, os.path.join(args.out, "unlearned.ckpt"))
    paths = harness.emit_curves(state, os.path.join(args.out, "gkt"))
    _emit_unlearn_outputs(report, args.out)
    print(f"curves: {paths['csv']}, plot: {paths['png']}")
    if state.selection_failed:
        print("warning: no epoch reached zero forget accuracy (selection_failed)",
              file=sys.stderr)
    return 0


def cmd_eval_ain(args) -> int:
    unlearned = load_checkpoint(args.model)
    gold = load_checkpoint(args.scratch)
    original = load_checkpoint(args.original)
    train_data = load_dataset(args.dataset, "train", root=args.data_root)
    test_part = partition(load_dataset(args.dataset, "test", root=args.data_root),
                          _parse_classes(args.forget))
    cfg = metrics.RelearnConfig(margin_pct=args.alpha, seed=args.seed)
    original_acc = evaluate(original, test_part.forget_view)
    run_u = metrics.relearn_time(unlearned, train_data, _parse_classes(args.forget),
                                 original_acc, cfg, forget_eval=test_part.forget_view)
    run_s = metrics.relearn_time(gold, train_data, _parse_classes(args.forget),
                                 original_acc, cfg, forget_eval=test_part.forget_view)
    ain = metrics.anamnesis_index(run_u, run_s)
    verdict = metrics.interpret_ain(ain.ain)
    print(f"relearn steps: unlearned {run_u.steps} (reached={run_u.reached}), "
          f"scratch {run_s.steps} (reached={run_s.reached})")
    print(f"anamnesis index: {ain.ain:.4f} ({verdict}{', bounded' if ain.bounded else ''})")
    return 0


def cmd_attack_invert(args) -> int:
    model = load_checkpoint(args.model)
    cfg = attacks.InversionConfig(target_class=args.target_class, num_attacks=args.n,
                                  steps=args.steps, seed=args.seed)
    images, confidences = attacks.invert(model, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    np.savez(os.path.join(args.out_dir, "inversions.npz"),
             images=images, confidences=np.asarray(confidences))
    with open(os.path.join(args.out_dir, "confidences.csv"), "w") as f:
        f.write("attack,target_class,confidence\n")
        for i, conf in enumerate(confidences):
            f.write(f"{i},{args.target_class},{conf:.6f}\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = min(6, len(images))
    rows = (len(images) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows))
    for ax, (img, conf) in zip(np.atleast_1d(axes).ravel(), zip(images, confidences)):
        ax.imshow(img.squeeze(-1) if img.shape[-1] == 1 else img, cmap="gray")
        ax.set_title(f"{conf:.2f}", fontsize=8)
    for ax in np.atleast_1d(axes).ravel():
        ax.axis("off")
    grid_path = os.path.join(args.out_dir, "inversions.png")
    fig.tight_layout()
    fig.savefig(grid_path, dpi=120)
    plt.close(fig)
    print(f"{len(images)} inversions, mean self-confidence "
          f"{float(np.mean(confidences)):.4f}; grid: {grid_path}")
    return 0


def cmd_attack_mia(args) -> int:
    model = load_checkpoint(args.model)
    train_data = load_dataset(args.dataset, "train", root=args.data_root)
    test_data = load_dataset(args.dataset, "test", root=args.data_root)
    views = {"train": train_data, "test": test_data}
    if args.forget:
        part = partition(train_data, _parse_classes(args.forget))
        views.update({"retain": part.retain_view, "forget": part.forget_view})
    result = attacks.membership_inference(model, train_data, test_data, views)
    for name, prob in sorted(result.attack_probabilities.items()):
        print(f"  {name:>8}: attack probability {prob:.4f}")
    print(f"attack classifier accuracy {result.attack_train_accuracy:.4f}"
          f"{' [degenerate]' if result.degenerate else ''}"
          f"{' [weaker than chance]' if result.weak else ''}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"attack_probabilities": result.attack_probabilities,
                       "attack_train_accuracy": result.attack_train_accuracy,
                       "degenerate": result.degenerate, "weak": result.weak},
                      f, indent=2, sort_keys=True)
    return 0


def cmd_sweep(args) -> int:
    base = {"seed": args.seed, "profile": args.profile}
    rows = harness.run_per_class_sweep(
        args.dataset, args.arch, args.method, base,
        classes=_parse_classes(args.classes) if args.classes else None,
        output_dir=args.out)
    for row in rows:
        if "error" in row:
            print(f"class {row['class']}: FAILED {row['error']}")
        else:
            print(f"class {row['class']}: forget {row['d_f_acc']:.2f}%, "
                  f"retain {row['d_r_acc']:.2f}% "
                  f"(retrain {row['retrain_d_r_acc']:.2f}%, "
                  f"deviation {row['d_r_deviation']:.2f})")
    ok_rows = [r for r in rows if "error" not in r]
    if ok_rows:
        mean_dev = sum(r["d_r_deviation"] for r in ok_rows) / len(ok_rows)
        print(f"average retain deviation: {mean_dev:.2f}")
    return 0


def cmd_report(args) -> int:
    reports = [harness.load_report(p) for p in args.inputs]
    text = harness.emit_results_table(reports, args.out,
                                      text_path=args.out.replace(".csv", ".txt"))
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zsunlearn",
                                     description="zero-shot class unlearning toolkit")
    parser.add_argument("--data-root", default=None,
                        help="root for on-disk datasets (default: $ZSU_DATA_ROOT)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset utilities")
    data_sub = p_data.add_subparsers(dest="subcommand", required=True)
    p_inspect = data_sub.add_parser("inspect", help="print a class histogram")
    p_inspect.add_argument("path", help="dataset spec string or descriptor .json")
    p_inspect.add_argument("--split", default="train", choices=["train", "test"])
    p_inspect.add_argument("--descriptor", default=None,
                           help="also write the dataset descriptor here")
    p_inspect.set_defaults(func=cmd_data_inspect)

    p_train = sub.add_parser("train", help="train a classifier")
    p_train.add_argument("--arch", required=True)
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--epochs", type=int, default=10)
    p_train.add_argument("--batch-size", type=int, default=256)
    p_train.add_argument("--lr", type=float, default=0.05)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--forget", default="",
                         help="train the retrained gold model on the complement")
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_unlearn = sub.add_parser("unlearn", help="run an unlearning method")
    unlearn_sub = p_unlearn.add_subparsers(dest="subcommand", required=True)
    p_mm = unlearn_sub.add_parser("minmax", help="noise min-max baseline")
    p_mm.add_argument("--model", required=True)
    p_mm.add_argument("--forget", required=True)
    p_mm.add_argument("--dataset", required=True, help="evaluation dataset spec")
    p_mm.add_argument("--config", default=None, help="json config overrides")
    p_mm.add_argument("--seed", type=int, default=0)
    p_mm.add_argument("--out", required=True)
    p_mm.set_defaults(func=cmd_unlearn_minmax)
    p_gkt = unlearn_sub.add_parser("gkt", help="gated knowledge transfer")
    p_gkt.add_argument("--teacher", required=True)
    p_gkt.add_argument("--forget", required=True)
    p_gkt.add_argument("--dataset", required=True, help="evaluation dataset spec")
    p_gkt.add_argument("--epochs", type=int, default=None)
    p_gkt.add_argument("--epsilon", type=float, default=None,
                       help="band-pass filter threshold")
    p_gkt.add_argument("--beta", type=float, default=None, help="attention weight")
    p_gkt.add_argument("--temperature", type=float, default=None)
    p_gkt.add_argument("--divergence", choices=["kl", "js"], default=None)
    p_gkt.add_argument("--config", default=None, help="json config overrides")
    p_gkt.add_argument("--seed", type=int, default=0)
    p_gkt.add_argument("--out", required=True)
    p_gkt.set_defaults(func=cmd_unlearn_gkt)

    p_eval = sub.add_parser("eval", help="evaluation metrics")
    eval_sub = p_eval.add_subparsers(dest="subcommand", required=True)
    p_ain = eval_sub.add_parser("ain", help="anamnesis index from relearn times")
    p_ain.add_argument("--model", required=True, help="unlearned checkpoint")
    p_ain.add_argument("--scratch", required=True, help="retrained gold checkpoint")
    p_ain.add_argument("--original", required=True, help="original checkpoint")
    p_ain.add_argument("--dataset", required=True)
    p_ain.add_argument("--forget", required=True)
    p_ain.add_argument("--alpha", type=float, default=5.0, help="margin percent")
    p_ain.add_argument("--seed", type=int, default=0)
    p_ain.set_defaults(func=cmd_eval_ain)

    p_attack = sub.add_parser("attack", help="privacy attacks")
    attack_sub = p_attack.add_subparsers(dest="subcommand", required=True)
    p_inv = attack_sub.add_parser("invert", help="model inversion attack")
    p_inv.add_argument("--model", required=True)
    p_inv.add_argument("--target-class", "--class", dest="target_class",
                       type=int, required=True)
    p_inv.add_argument("--n", type=int, default=12)
    p_inv.add_argument("--steps", type=int, default=400)
    p_inv.add_argument("--seed", type=int, default=0)
    p_inv.add_argument("--out-dir", required=True)
    p_inv.set_defaults(func=cmd_attack_invert)
    p_mia = attack_sub.add_parser("mia", help="membership inference attack")
    p_mia.add_argument("--model", required=True)
    p_mia.add_argument("--dataset", required=True)
    p_mia.add_argument("--forget", default="")
    p_mia.add_argument("--out", default=None)
    p_mia.set_defaults(func=cmd_attack_mia)

    p_sweep = sub.add_parser("sweep", help="per-class unlearning sweep")
    p_sweep.add_argument("--dataset", required=True)
    p_sweep.add_argument("--arch", required=True)
    p_sweep.add_argument("--method", required=True, choices=["minmax", "gkt"])
    p_sweep.add_argument("--classes", default="", help="comma list; default all")
    p_sweep.add_argument("--profile", default="desk", choices=["desk", "paper"])
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out", default="runs")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="assemble a results table")
    p_report.add_argument("inputs", nargs="+", help="report.json paths")
    p_report.add_argument("--out", required=True, help="output csv path")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.data_root:
        os.environ.setdefault("ZSU_DATA_ROOT", args.data_root)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
