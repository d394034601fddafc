"""Command-line front end: train, evaluate, purify, ablate, report.

Every run echoes its effective configuration into the output directory;
re-running from that echo with the same seed reproduces the run bit for
bit. Flags override config-file values; the environment is never read.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import persistence
from .attacks import AttackSpec
from .config import Config, ConfigError, load_config, parse_budget, write_effective_config
from .data import DatasetFormatError
from .evaluation import EvalSpec, ablation_grid, evaluate
from .nn import ArchError
from .persistence import load_checkpoint, save_checkpoint
from .purify import tpap_predict
from .tensor import ShapeError
from .training import adversarial_train, clone_with_state, robust_overfit_check


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpurify",
                                     description="FGSM robust-overfitting training and test-time purification")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--dataset", help="data.name: blobs, cifar10 or mnist")
        p.add_argument("--data-dir", help="cifar10 batch directory")
        p.add_argument("--threads", type=int, help="cap BLAS worker threads")

    p_train = sub.add_parser("train", help="run (adversarial) training, save checkpoints and history")
    common(p_train)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch-size", type=int)
    p_train.add_argument("--lr0", type=float)
    p_train.add_argument("--epsilon", help="training attack budget, e.g. 8/255")
    p_train.add_argument("--attack-kind", choices=["fgsm", "pgd", "none"])
    p_train.add_argument("--arch", choices=["auto", "mlp", "smallcnn"])
    p_train.add_argument("--eval-every", type=int)
    p_train.add_argument("--max-train", type=int, help="cap the training set size")

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint against the configured attacks")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--max-examples", type=int)
    p_eval.add_argument("--xi", help="purification radius, e.g. 8/255")
    p_eval.add_argument("--no-purify", action="store_true", help="disable the purifier rows")
    p_eval.add_argument("--attacks", help="comma list, e.g. clean,fgsm,pgd20,pgd100")

    p_pur = sub.add_parser("purify", help="purify a stored batch and dump the per-image trace")
    common(p_pur)
    p_pur.add_argument("--checkpoint", required=True)
    p_pur.add_argument("--n", type=int, default=64, help="number of test examples")
    p_pur.add_argument("--attack", default="clean", help="craft this attack first (clean, fgsm, pgdN)")
    p_pur.add_argument("--xi", help="purification radius, e.g. 8/255")

    p_abl = sub.add_parser("ablate", help="train a small epsilon x batch-size grid")
    common(p_abl)
    p_abl.add_argument("--epsilons", required=True, help="comma list, e.g. 8/255,12/255")
    p_abl.add_argument("--batch-sizes", required=True, help="comma list, e.g. 64,128")
    p_abl.add_argument("--epochs", type=int)
    p_abl.add_argument("--max-train", type=int)

    p_rep = sub.add_parser("report", help="render a stored report JSON as a table")
    p_rep.add_argument("--report", required=True)
    return parser


def _overrides_from(args: argparse.Namespace) -> dict:
    mapping = {
        "out": "output_dir",
        "seed": "seed",
        "threads": "threads",
        "dataset": "data.name",
        "data_dir": "data.dir",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "lr0": "train.lr0",
        "epsilon": "train.epsilon",
        "attack_kind": "train.attack_kind",
        "arch": "model.arch",
        "eval_every": "train.eval_every",
        "max_train": "data.max_train",
        "max_examples": "eval.max_examples",
        "xi": "purifier.xi",
        "attacks": None,  # handled separately
    }
    out = {}
    for attr, dotted in mapping.items():
        if dotted is None or not hasattr(args, attr):
            continue
        val = getattr(args, attr)
        if val is not None:
            out[dotted] = val
    if getattr(args, "attacks", None):
        out["eval.attacks"] = [a.strip() for a in args.attacks.split(",") if a.strip()]
    if getattr(args, "no_purify", False):
        out["purifier.enabled"] = False
    return out


def _cap_threads(cfg: Config) -> None:
    if cfg.threads <= 0:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(cfg.threads)
    except ImportError:
        print("threadpoolctl not installed; --threads ignored", file=sys.stderr)


def _prepare(cfg: Config) -> str:
    out_dir = cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    _cap_threads(cfg)
    write_effective_config(cfg, out_dir)
    return out_dir


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def _cmd_train(cfg: Config) -> int:
    out_dir = _prepare(cfg)
    train, test = cfg.load_datasets()
    model = cfg.build_model(train.input_shape, train.num_classes, cfg.raw["data"]["name"])
    spec = cfg.train_spec()
    history_path = os.path.join(out_dir, "history.csv")

    def on_epoch(rec):
        persistence.append_history_row(history_path, rec)
        print(f"epoch {rec.epoch}/{spec.epochs} lr {rec.lr:g} loss {rec.mean_loss:.4f} "
              f"{rec.wall_seconds:.1f}s clean {_fmt(rec.clean_test_acc)} "
              f"fgsm {_fmt(rec.fgsm_test_acc)} pgd {_fmt(rec.pgd_test_acc)}", flush=True)

    history, best_state = adversarial_train(model, train, test, spec, on_epoch=on_epoch)
    meta = {"dataset": train.name, "seed": cfg.seed, "epochs": spec.epochs,
            "attack_kind": cfg.raw["train"]["attack_kind"],
            "epsilon": spec.attack.epsilon if spec.attack else 0.0}
    save_checkpoint(model, dict(meta, which="final"), os.path.join(out_dir, "checkpoint.tpck"))
    best = clone_with_state(model, best_state)
    save_checkpoint(best, dict(meta, which="best"), os.path.join(out_dir, "checkpoint-best.tpck"))
    print(f"saved {os.path.join(out_dir, 'checkpoint.tpck')} and checkpoint-best.tpck")
    return 0


def _cmd_evaluate(cfg: Config, checkpoint: str) -> int:
    out_dir = _prepare(cfg)
    model, _meta = load_checkpoint(checkpoint)
    _train, test = cfg.load_datasets()
    spec = EvalSpec(attacks=cfg.eval_attacks(), purifier=cfg.purifier_spec(),
                    max_examples=int(cfg.raw["eval"]["max_examples"]), seed=cfg.seed,
                    batch_size=int(cfg.raw["eval"]["batch_size"]))
    report = evaluate(model, test, spec)
    persistence.write_report_json(report, os.path.join(out_dir, "report.json"))
    persistence.write_report_csv(report, os.path.join(out_dir, "report.csv"))
    print(persistence.render_report(report))
    return 0


def _cmd_purify(cfg: Config, checkpoint: str, n: int, attack_name: str) -> int:
    out_dir = _prepare(cfg)
    model, _meta = load_checkpoint(checkpoint)
    _train, test = cfg.load_datasets()
    sub = test.take(n)
    images, labels = sub.images, sub.labels
    if attack_name != "clean":
        spec = dict(cfg.eval_attacks()).get(attack_name)
        if spec is None:
            eps = parse_budget(cfg.raw["eval"]["epsilon"], "eval.epsilon")
            if attack_name == "fgsm":
                spec = AttackSpec.fgsm_spec(eps)
            elif attack_name.startswith("pgd"):
                spec = AttackSpec.pgd_spec(eps, steps=int(attack_name[3:] or 20))
            else:
                raise ConfigError(f"unknown attack {attack_name!r}")
        from .evaluation import craft_attack_set

        images = craft_attack_set(model, images, labels, spec, seed=cfg.seed)
    purifier = cfg.purifier_spec()
    if purifier is None:
        raise ConfigError("purify: the purifier is disabled in this config")
    final, trace = tpap_predict(model, images, purifier)
    path = os.path.join(out_dir, "trace.jsonl")
    persistence.write_trace_jsonl(trace, path)
    acc = float((final == labels).mean()) * 100.0
    pre_acc = float((trace.pre_labels == labels).mean()) * 100.0
    print(f"purified {len(images)} examples ({attack_name}); accuracy {pre_acc:.2f} -> {acc:.2f}; "
          f"trace at {path}")
    return 0


def _cmd_ablate(cfg: Config, epsilons: str, batch_sizes: str) -> int:
    out_dir = _prepare(cfg)
    eps_list = [parse_budget(tok, "--epsilons") for tok in epsilons.split(",") if tok]
    bs_list = [int(tok) for tok in batch_sizes.split(",") if tok]
    train, test = cfg.load_datasets()
    base = cfg.train_spec()

    def train_fn(train_ds, test_ds, eps, bs):
        from dataclasses import replace

        spec = replace(base, batch_size=bs, attack=AttackSpec.fgsm_spec(eps))
        model = cfg.build_model(train_ds.input_shape, train_ds.num_classes,
                                cfg.raw["data"]["name"])
        history, _best = adversarial_train(model, train_ds, test_ds, spec)
        verdict = robust_overfit_check(
            model, train_ds, test_ds, AttackSpec.fgsm_spec(eps),
            AttackSpec.pgd_spec(eps, steps=20), max_examples=base.eval_max, seed=cfg.seed)
        return model, history, verdict

    grid = ablation_grid(train_fn, (train, test), eps_list, bs_list)
    summary = []
    for (eps, bs), cell in grid.items():
        tag = f"eps{eps:.4f}-bs{bs}"
        curve_path = os.path.join(out_dir, f"curves-{tag}.csv")
        for rec in cell["history"].records:
            persistence.append_history_row(curve_path, rec)
        v = cell["verdict"]
        summary.append({"epsilon": eps, "batch_size": bs,
                        "is_robust_overfit": v.is_robust_overfit,
                        "trained_attack_train_acc": v.trained_attack_train_acc,
                        "other_attack_train_acc": v.other_attack_train_acc,
                        "clean_test_acc": v.clean_test_acc,
                        "trained_attack_test_acc": v.trained_attack_test_acc})
        print(f"cell eps={eps:.4f} bs={bs}: overfit={v.is_robust_overfit} "
              f"trained_train={v.trained_attack_train_acc:.1f} other_train={v.other_attack_train_acc:.1f} "
              f"clean_test={v.clean_test_acc:.1f}")
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    return 0


def _cmd_report(path: str) -> int:
    report = persistence.read_report_json(path)
    print(persistence.render_report(report))
    return 0


def run_cli(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "report":
            return _cmd_report(args.report)
        cfg = load_config(args.config, _overrides_from(args))
        if args.command == "train":
            return _cmd_train(cfg)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, args.checkpoint)
        if args.command == "purify":
            return _cmd_purify(cfg, args.checkpoint, args.n, args.attack)
        if args.command == "ablate":
            return _cmd_ablate(cfg, args.epsilons, args.batch_sizes)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, DatasetFormatError, persistence.CheckpointError, ArchError,
            ShapeError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))
