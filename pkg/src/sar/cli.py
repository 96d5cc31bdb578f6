"""``sar`` command-line front end.

Exit codes: 0 success, 2 usage error, 3 configuration/data/artifact error,
4 training failure.  Every failure prints exactly one JSON line to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import cas as cas_mod
from . import experiment as X
from . import pipeline
from . import qtd as qtd_mod
from . import ve as ve_mod
from .artifacts import TOOL_VERSION
from .captions import StrategyPlan, build_category_dict
from .config import DEFAULT_N, ExperimentConfig, VeParams, load_config
from .errors import ArtifactError, ConfigError, SarError, TrainingError
from .qtd import NPrimePolicy

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_TRAINING = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True), file=sys.stderr)
    return code


def _int_list(text):
    """'1,2,5-8' -> [1, 2, 5, 6, 7, 8]."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like '1,2,5-8', got {text!r}") from None
    return out


def _require(path, what):
    if path is None:
        raise ArtifactError(f"missing required artifact: --{what}")
    if not Path(path).exists():
        raise ArtifactError(f"missing {what} artifact: {path}")
    return path


def _base_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args):
    cfg = _base_config(args)
    world = cfg.world
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.prior_skew is not None:
        overrides["prior_skew"] = args.prior_skew
    if args.num_images is not None:
        overrides["num_images"] = args.num_images
    if args.soft_targets:
        overrides["soft_targets"] = True
    world = replace(world, **overrides).validate() if overrides else world.validate()
    X.save_world(world, args.out)
    print(json.dumps({"out": str(args.out), "world": world.to_dict()}, sort_keys=True))
    return 0


def _provenance(args, extra=None):
    d = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "report", "curve") and v is not None}
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in d.items()}
    if extra:
        d.update(extra)
    return d


def cmd_train_cas(args):
    world = X.open_world(args.data)
    train = world.split("train")
    model = cas_mod.train_cas(train, world.features, args.epochs, args.lr, args.seed, args.batch_size)
    cas_mod.save_cas(model, args.out, seed=args.seed, config=_provenance(args))
    print(json.dumps({"out": str(args.out), "final_loss": model.loss_history[-1]}, sort_keys=True))
    return 0


def cmd_train_qtd(args):
    NPrimePolicy(args.nprime_yesno, args.nprime_other).validate()
    world = X.open_world(args.data)
    model, cv = qtd_mod.train_qtd(world.split("train"), folds=args.folds, seed=args.seed, epochs=args.epochs, lr=args.lr)
    qtd_mod.save_qtd(model, args.out, seed=args.seed, config=_provenance(args), cv_accuracy=cv)
    print(json.dumps({"out": str(args.out), "cv_accuracy": cv}, sort_keys=True))
    return 0


def cmd_train_ve(args):
    world = X.open_world(args.data)
    train = world.split("train")
    cas_model = cas_mod.load_cas(_require(args.cas, "cas"), train.answer_vocabulary)
    plan = StrategyPlan.parse(args.strategy)
    params = VeParams(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, alpha=args.alpha,
        ssl=args.ssl, warmup_epochs=args.warmup_epochs, warmup_lr=args.warmup_lr,
    )
    params.train_config().validate()
    if not 1 <= args.N <= cas_model.num_answers:
        raise ConfigError(f"N must lie in [1, {cas_model.num_answers}], got {args.N}")
    model, curve = X.fit_ve(world, cas_model, params, args.N, plan.train_strategy)
    model.meta["plan"] = plan.name
    ve_mod.save_ve(model, args.out, seed=args.seed, config=_provenance(args))
    curve_path = Path(args.curve) if args.curve else Path(str(args.out) + ".curve.csv")
    rows = [{"phase": "warmup", "epoch": i + 1, "mean_loss": v} for i, v in enumerate(model.meta["warmup_curve"])]
    rows += [{"phase": "train", "epoch": i + 1, "mean_loss": v} for i, v in enumerate(curve)]
    X.write_text(curve_path, pipeline.rows_to_csv(rows, ["phase", "epoch", "mean_loss"]))
    print(json.dumps({"out": str(args.out), "curve": str(curve_path), "final_loss": curve[-1] if curve else None}))
    return 0


def _load_models(args, world, need_ve=True):
    vocab = world.split("train").answer_vocabulary
    cas_model = cas_mod.load_cas(_require(args.cas, "cas"), vocab)
    ve_model = ve_mod.load_ve(_require(args.ve, "ve"), vocab) if need_ve else None
    return cas_model, ve_model


def cmd_eval(args):
    world = X.open_world(args.data)
    policy = NPrimePolicy(args.nprime_yesno, args.nprime_other).validate()
    cas_only = policy.n_prime_yes_no == policy.n_prime_other == 1 and args.ve is None
    cas_model, ve_model = _load_models(args, world, need_ve=not cas_only)
    qtd_model = None
    if policy.n_prime_yes_no != policy.n_prime_other:
        qtd_model = qtd_mod.load_qtd(_require(args.qtd, "qtd"))
    plan = StrategyPlan.parse(args.strategy)
    cdict = build_category_dict(world.split("train"))
    split = world.split(args.split)
    iid = world.splits.get("val_iid") if args.split != "val_iid" else None
    report = pipeline.evaluate(cas_model, ve_model, qtd_model, cdict, plan, policy, split, world.features, iid_split=iid)
    doc = {
        "tool_version": TOOL_VERSION,
        "strategy": plan.name,
        "policy": {"yes_no": policy.n_prime_yes_no, "other": policy.n_prime_other},
        "report": report.to_dict(),
    }
    X.write_json(args.report, doc)
    recall_rows = [{"N": k, "recall": v} for k, v in sorted(report.topn_recall_curve.items())]
    X.write_text(Path(str(args.report) + ".recall.csv"), pipeline.rows_to_csv(recall_rows, ["N", "recall"]))
    print(json.dumps({"report": str(args.report), "accuracy_all": report.accuracy_all, "gap": report.gap}))
    return 0


def cmd_sweep(args):
    world = X.open_world(args.data)
    cas_model, ve_model = _load_models(args, world)
    plan = StrategyPlan.parse(args.strategy)
    cdict = build_category_dict(world.split("train"))
    other = args.other or list(range(1, ve_model.train_n + 1))
    rows = pipeline.sweep_n_prime(
        cas_model, ve_model, cdict, plan, world.split(args.split), world.features, args.yes_no, other
    )
    X.write_text(args.out, pipeline.rows_to_csv(rows, ["type", "n_prime", "accuracy", "count"]))
    print(json.dumps({"out": str(args.out), "rows": len(rows)}))
    return 0


def cmd_ablate(args):
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    world = X.build_world(cfg.world)
    log = (lambda m: print(json.dumps({"progress": m}), file=sys.stderr)) if args.verbose else None
    table, reports, trained = X.run_ablation(cfg, world, log=log)
    doc = {
        "tool_version": TOOL_VERSION,
        "config": cfg.to_dict(),
        "qtd_cv_accuracy": trained.qtd_cv,
        "rows": table,
        "reports": {name: rep.to_dict() for name, rep in reports},
    }
    X.write_json(out / "ablation.json", doc)
    cols = ["name", "accuracy_all", "accuracy_yes_no", "accuracy_non_yes_no", "accuracy_iid", "gap", "delta_vs_cas_only"]
    X.write_text(out / "ablation.csv", pipeline.rows_to_csv(table, cols))
    print(json.dumps({"out": str(out / "ablation.json"), "rows": len(table)}))
    return 0


def cmd_grad_check(args):
    from .text import TokenVocab

    rng = np.random.default_rng([args.seed, 808])
    vocab = TokenVocab([f"w{i}" for i in range(12)])
    arch = ve_mod.VeArch(d=args.d, heads=2, hidden=args.d, feature_dim=args.feature_dim)
    model = ve_mod.init_model(arch, vocab, seed=args.seed)
    B, L, Kobj = args.batch, 5, 6
    ids = rng.integers(2, len(vocab), (B, L))
    mask = np.ones((B, L), dtype=bool)
    mask[0, L - 2 :] = False
    batch = (ids, mask, rng.uniform(0, 1, (B, Kobj, args.feature_dim)), rng.uniform(0, 1, B))
    tensors = ve_mod.HEAD_PARAMS if args.head_only else None
    err = ve_mod.grad_check(model, batch, epsilon=args.epsilon, tensors=tensors, alpha=args.alpha, seed=args.seed)
    limit = 1e-6 if args.head_only else 1e-4
    print(
        json.dumps(
            {"max_relative_error": err, "limit": limit, "passed": err < limit, "per_tensor": ve_mod.grad_check.last_details},
            sort_keys=True,
        )
    )
    return 0 if err < limit else EXIT_TRAINING


# -- parser ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="sar", description="Select-and-rerank VQA at desk scale.")
    p.add_argument("--version", action="version", version=f"sar {TOOL_VERSION}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic world")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int)
    g.add_argument("--config", type=Path)
    g.add_argument("--prior-skew", type=float)
    g.add_argument("--num-images", type=int)
    g.add_argument("--soft-targets", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("train-cas", help="train the candidate answer selector")
    c.add_argument("--data", required=True, type=Path)
    c.add_argument("--out", required=True, type=Path)
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--lr", type=float, default=0.5)
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_train_cas)

    q = sub.add_parser("train-qtd", help="train the question type discriminator")
    q.add_argument("--data", required=True, type=Path)
    q.add_argument("--out", required=True, type=Path)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--folds", type=int, default=5)
    q.add_argument("--epochs", type=int, default=8)
    q.add_argument("--lr", type=float, default=0.01)
    q.add_argument("--nprime-yesno", type=int, default=2)
    q.add_argument("--nprime-other", type=int, default=8)
    q.set_defaults(func=cmd_train_qtd)

    v = sub.add_parser("train-ve", help="train the visual-entailment scorer")
    v.add_argument("--data", required=True, type=Path)
    v.add_argument("--cas", type=Path)
    v.add_argument("--out", required=True, type=Path)
    v.add_argument("--strategy", default="RtoC")
    v.add_argument("--N", type=int, default=DEFAULT_N)
    v.add_argument("--ssl", action="store_true")
    v.add_argument("--alpha", type=float, default=1.0)
    v.add_argument("--epochs", type=int, default=30)
    v.add_argument("--batch-size", type=int, default=64)
    v.add_argument("--lr", type=float, default=1e-3)
    v.add_argument("--warmup-epochs", type=int, default=25)
    v.add_argument("--warmup-lr", type=float, default=1e-3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--curve", type=Path, help="loss curve CSV (default: <out>.curve.csv)")
    v.set_defaults(func=cmd_train_ve)

    e = sub.add_parser("eval", help="evaluate a trained pipeline")
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--cas", type=Path)
    e.add_argument("--ve", type=Path)
    e.add_argument("--qtd", type=Path)
    e.add_argument("--strategy", default="RtoC")
    e.add_argument("--nprime-yesno", type=int, default=2)
    e.add_argument("--nprime-other", type=int, default=8)
    e.add_argument("--split", default="test_shifted", choices=["train", "test_shifted", "val_iid"])
    e.add_argument("--report", required=True, type=Path)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation table from a TOML config")
    a.add_argument("--config", required=True, type=Path)
    a.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")
    a.add_argument("--verbose", action="store_true")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep", help="accuracy per question type as N' varies")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--cas", type=Path)
    s.add_argument("--ve", type=Path)
    s.add_argument("--strategy", default="RtoC")
    s.add_argument("--split", default="test_shifted", choices=["train", "test_shifted", "val_iid"])
    s.add_argument("--yes-no", type=_int_list, default=[1, 2])
    s.add_argument("--other", type=_int_list)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_sweep)

    k = sub.add_parser("grad-check", help="finite-difference check of the scorer gradients")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--d", type=int, default=16)
    k.add_argument("--feature-dim", type=int, default=24)
    k.add_argument("--batch", type=int, default=4)
    k.add_argument("--epsilon", type=float, default=1e-4)
    k.add_argument("--alpha", type=float, default=1.0)
    k.add_argument("--head-only", action="store_true")
    k.set_defaults(func=cmd_grad_check)
    return p


def run_command(argv):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        return args.func(args)
    except TrainingError as exc:
        return _fail("training", str(exc), EXIT_TRAINING)
    except SarError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_CONFIG)


def main(argv=None):
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
