"""Command-line entry points for the watermark/verify toolkit.

Subcommands mirror the pipeline stages; `run` executes the whole experiment
from a JSON config. Exit codes: 0 success, 2 configuration error, 3 stage
failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as data_mod
from .data import (
    ConfigurationError,
    StyleSpec,
    build_watermarked_dataset,
    load_dataset_npz,
    load_style_image,
    make_default_style_image,
    make_synthetic_dataset,
    save_dataset_npz,
    select_poison_indices,
)
from .models import load_checkpoint, save_checkpoint
from .training import TrainConfig, train_model, evaluate_accuracy
from .stealing import AttackConfig, run_attack, AttackConfigError
from .signatures import (
    MetaTrainConfig,
    build_meta_training_set,
    train_meta_classifier,
    load_meta_classifier,
    save_meta_classifier,
)
from .verification import verify_ownership, reports_to_csv, CSV_COLUMNS
from .backdoor import TriggerRecoveryConfig, recover_trigger, save_pattern_png
from .pipeline import (
    StageError,
    build_mask,
    load_config,
    report_table,
    run_experiment,
    RunLedger,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _load_any_dataset(spec):
    """Dataset argument: path to .npz, 'synthetic:<n>:<seed>', or cifar dir."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        n = int(parts[1])
        seed = int(parts[2]) if len(parts) > 2 else 0
        return make_synthetic_dataset(n, seed=seed)
    if spec.endswith(".npz"):
        return load_dataset_npz(spec)
    if os.path.isdir(spec):
        return data_mod.load_cifar10_binary(spec, "train")
    raise ConfigurationError(f"cannot interpret dataset spec {spec!r}")


def _style_from_args(args, image_shape):
    img = load_style_image(args.style) if args.style else make_default_style_image(
        hw=image_shape[1:]
    )
    return StyleSpec(style_image=img, transformer_id=args.transformer, blend=args.blend)


def cmd_embed(args):
    ds = _load_any_dataset(args.data)
    style = _style_from_args(args, ds[0].shape)
    plan = select_poison_indices(ds, args.gamma, args.seed)
    transformed, benign_rest = build_watermarked_dataset(ds, plan, style)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "plan.json"), "w") as f:
        f.write(plan.to_json())
    save_dataset_npz(transformed, os.path.join(args.out, "transformed.npz"))
    save_dataset_npz(benign_rest, os.path.join(args.out, "benign_rest.npz"))
    print(f"embedded {len(transformed)} transformed + {len(benign_rest)} benign -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    datasets = [_load_any_dataset(p) for p in args.data]
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed
    )
    handle = train_model(datasets if len(datasets) > 1 else datasets[0], args.arch, cfg,
                         log_fn=print if args.verbose else None)
    save_checkpoint(handle, args.out)
    print(f"trained {args.arch} -> {args.out} (hash {handle.content_hash()[:12]})")
    if args.eval_data:
        acc = evaluate_accuracy(handle, _load_any_dataset(args.eval_data))
        print(f"accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_steal(args):
    victim = load_checkpoint(args.victim)
    surrogate = _load_any_dataset(args.surrogate) if args.surrogate else None
    cfg = AttackConfig(
        attack_id=args.attack,
        surrogate=surrogate,
        student_arch_id=args.arch or victim.arch_id,
        epochs=args.epochs,
        temperature=args.temperature,
        generator_steps=args.generator_steps,
        query_budget=args.query_budget,
        seed=args.seed,
    )
    student = run_attack(victim, cfg)
    save_checkpoint(student, args.out)
    print(f"stole via {args.attack} -> {args.out} (hash {student.content_hash()[:12]})")
    return EXIT_OK


def cmd_fit_meta(args):
    victim = load_checkpoint(args.victim)
    benign = load_checkpoint(args.benign)
    transformed = load_dataset_npz(args.transformed)
    if args.limit and args.limit < len(transformed):
        transformed = transformed.subset(range(args.limit), name=f"{transformed.name}/meta")
    mask = build_mask({"mask": {"kind": args.mask}}, victim)
    pairs = build_meta_training_set(victim, benign, transformed, args.mode, mask)
    meta = train_meta_classifier(
        pairs, MetaTrainConfig(classifier=args.classifier, seed=args.seed)
    )
    save_meta_classifier(meta, args.out)
    print(f"meta-classifier ({args.mode}) -> {args.out}")
    return EXIT_OK


def cmd_verify(args):
    meta = load_meta_classifier(args.meta)
    suspect = load_checkpoint(args.suspect)
    benign = load_checkpoint(args.benign)
    pool = load_dataset_npz(args.pool)
    mask = build_mask({"mask": {"kind": args.mask}}, suspect)
    report = verify_ownership(
        meta, suspect, benign, pool, m=args.m, alpha=args.alpha, seed=args.seed,
        mode=args.mode, mask=mask, hard_scores=(args.scores == "hard"),
        attack_id=args.attack_id,
    )
    print(json.dumps(report.to_dict(), indent=1))
    if args.csv:
        new = not os.path.exists(args.csv)
        with open(args.csv, "a") as f:
            if new:
                f.write(",".join(CSV_COLUMNS) + "\n")
            f.write(reports_to_csv([report]).split("\n", 1)[1])
    print(f"decision: {report.decision} (p={report.p_value:.3e}, delta_mu={report.delta_mu:.4f})")
    return EXIT_OK


def cmd_run(args):
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.gamma is not None:
        overrides["gamma_percent"] = args.gamma
    if args.m is not None:
        overrides["m"] = args.m
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seeds"] = {"plan": args.seed}
    if args.attack:
        overrides["attacks"] = [{"attack_id": a} for a in args.attack]
    cfg = load_config(args.config, overrides)
    ledger = run_experiment(cfg, log_fn=print if args.verbose else None)
    print(report_table(ledger, grouping="attack"))
    acc = ledger.stats.get("accuracy", {})
    for name in sorted(acc):
        print(f"accuracy[{name}] = {acc[name]:.4f}")
    print(f"ledger: {os.path.join(cfg['out_dir'], 'ledger.json')}")
    return EXIT_OK


def cmd_report(args):
    ledger = RunLedger(args.out_dir)
    if not ledger.reports:
        raise ConfigurationError(f"no reports recorded under {args.out_dir}")
    print(report_table(ledger, grouping=args.grouping))
    return EXIT_OK


def cmd_recover_trigger(args):
    model = load_checkpoint(args.model)
    probe = _load_any_dataset(args.probe)
    cfg = TriggerRecoveryConfig(
        epsilon=args.epsilon, iterations=args.iterations, init=args.init
    )
    init_pattern = None
    if args.init == "pattern":
        init_pattern = np.load(args.init_pattern)
    pattern = recover_trigger(model, args.target, cfg, probe, init_pattern=init_pattern)
    save_pattern_png(
        pattern, args.out, target_label=args.target, epsilon=args.epsilon,
        iterations=args.iterations,
    )
    print(f"recovered pattern -> {args.out} (linf={np.abs(pattern).max() * 255:.1f}/255)")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="stylemark",
                                description="External-feature watermarking and "
                                            "ownership verification for image classifiers")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("embed", help="build the watermarked training set")
    sp.add_argument("--data", required=True)
    sp.add_argument("--style", default=None, help="style image file (default: built-in)")
    sp.add_argument("--transformer", default="moment-match")
    sp.add_argument("--blend", type=float, default=1.0)
    sp.add_argument("--gamma", type=float, default=10.0)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_embed)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", nargs="+", required=True)
    sp.add_argument("--arch", default="cnn-small")
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--eval-data", default=None)
    sp.add_argument("--verbose", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("steal", help="run a stealing attack against a checkpoint")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--attack", required=True,
                    choices=["distillation", "zero_shot", "fine_tune", "label_query",
                             "logit_query"])
    sp.add_argument("--surrogate", default=None)
    sp.add_argument("--arch", default=None)
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--temperature", type=float, default=4.0)
    sp.add_argument("--generator-steps", type=int, default=400)
    sp.add_argument("--query-budget", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_steal)

    sp = sub.add_parser("fit-meta", help="train the ownership meta-classifier")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--benign", required=True)
    sp.add_argument("--transformed", required=True)
    sp.add_argument("--mode", choices=["sign", "raw"], default="raw")
    sp.add_argument("--mask", choices=["head_bias", "last_layers", "all"],
                    default="head_bias")
    sp.add_argument("--classifier", choices=["logreg", "mlp"], default="mlp")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_fit_meta)

    sp = sub.add_parser("verify", help="verify a suspect model")
    sp.add_argument("--meta", required=True)
    sp.add_argument("--suspect", required=True)
    sp.add_argument("--benign", required=True)
    sp.add_argument("--pool", required=True, help="transformed image pool (.npz)")
    sp.add_argument("--m", type=int, default=10)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=["sign", "raw"], default="raw")
    sp.add_argument("--mask", choices=["head_bias", "last_layers", "all"],
                    default="head_bias")
    sp.add_argument("--scores", choices=["hard", "soft"], default="hard")
    sp.add_argument("--attack-id", default="")
    sp.add_argument("--csv", default=None, help="append the report to this CSV")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("run", help="run the full pipeline from a config")
    sp.add_argument("--config", default=None)
    sp.add_argument("--out", default=None)
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--m", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--mode", choices=["sign", "raw"], default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--attack", action="append", default=None,
                    help="attack id (repeatable); overrides config attacks")
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("report", help="print the report table for a run directory")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--grouping", choices=["attack", "mode"], default="attack")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("recover-trigger", help="universal targeted perturbation search")
    sp.add_argument("--model", required=True)
    sp.add_argument("--target", type=int, required=True)
    sp.add_argument("--probe", required=True)
    sp.add_argument("--epsilon", type=float, default=32.0)
    sp.add_argument("--iterations", type=int, default=40)
    sp.add_argument("--init", choices=["zeros", "pattern"], default="zeros")
    sp.add_argument("--init-pattern", default=None, help=".npy pattern for init=pattern")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_recover_trigger)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, AttackConfigError, FileNotFoundError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
