"""Seeded end-to-end runs shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import cas as cas_mod
from . import qtd as qtd_mod
from . import ve as ve_mod
from . import pipeline
from .captions import StrategyPlan, build_captions, build_category_dict
from .errors import ArtifactError, ConfigError
from .qtd import NPrimePolicy
from .synthworld import (
    DESCRIPTIONS_FILE,
    description_corpus,
    generate_world,
    load_world,
    read_descriptions,
    write_world,
)


@dataclass
class World:
    features: dict
    splits: dict
    descriptions: list

    def split(self, name):
        if name not in self.splits:
            raise ArtifactError(f"dataset has no {name!r} split")
        return self.splits[name]


def build_world(world_cfg):
    feats, train, test, val = generate_world(world_cfg)
    fd = {f.image_id: f for f in feats}
    desc = description_corpus(world_cfg, fd, [ex.image_id for ex in train.examples], world_cfg.seed)
    return World(fd, {s.name: s for s in (train, test, val)}, desc)


def save_world(world_cfg, directory):
    feats, train, test, val = generate_world(world_cfg)
    write_world(world_cfg, feats, [train, test, val], directory)


def open_world(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise ArtifactError(f"missing data directory: {directory}")
    features, splits = load_world(directory)
    p = directory / DESCRIPTIONS_FILE
    desc = read_descriptions(p) if p.exists() else []
    return World(features, splits, desc)


def fit_cas(world, params):
    return cas_mod.train_cas(world.split("train"), world.features, params.epochs, params.lr, params.seed, params.batch_size)


def fit_ve(world, cas_model, ve_params, N, train_strategy, ssl=None):
    """Warm up on the description corpus, then train on top-N captions."""
    train = world.split("train")
    cdict = build_category_dict(train)
    plan = StrategyPlan(train_strategy, train_strategy)
    cands = cas_mod.candidate_sets(cas_model, train, world.features, N)
    data = build_captions(train, cands, plan, "train", cdict)
    vocab = ve_mod.build_token_vocab(data.records, world.descriptions)
    feature_dim = next(iter(world.features.values())).vectors.shape[1]
    model = ve_mod.init_model(ve_params.arch(feature_dim), vocab, seed=ve_params.seed)
    warm_curve = []
    if ve_params.warmup_epochs > 0:
        if not world.descriptions:
            raise ArtifactError("warm-up requested but the dataset has no description corpus")
        model, warm_curve = ve_mod.warm_up(
            model, world.descriptions, world.features, ve_params.warmup_epochs, ve_params.batch_size,
            ve_params.warmup_lr, ve_params.seed,
        )
    cfg = ve_params.train_config(ssl=ssl)
    model, curve = ve_mod.train_ve(model, data, world.features, cfg)
    model.answer_vocabulary = tuple(cas_model.answer_vocabulary)
    model.train_n = N
    model.meta = {"train_strategy": train_strategy, "ssl": cfg.ssl_enabled, "warmup_curve": warm_curve, "loss_curve": curve}
    return model, curve


def fit_qtd(world, params):
    return qtd_mod.train_qtd(world.split("train"), folds=params.folds, seed=params.seed, epochs=params.epochs, lr=params.lr)


@dataclass
class Trained:
    cas: object
    cdict: object
    qtd: object = None
    qtd_cv: float | None = None
    ve: dict = field(default_factory=dict)  # (train_strategy, ssl) -> VeModel


def _report(world, trained, ve_model, plan, policy, qtd_model):
    return pipeline.evaluate(
        trained.cas, ve_model, qtd_model, trained.cdict, plan, policy,
        world.split("test_shifted"), world.features, iid_split=world.split("val_iid"),
    )


def run_ablation(cfg, world=None, log=None):
    """Train what the ablation rows need and evaluate each row.

    Returns ``(rows, reports, trained)`` where ``rows`` is the table produced
    by :func:`pipeline.ablation_table`.
    """
    say = log or (lambda msg: None)
    world = world or build_world(cfg.world)
    say("training CAS")
    cas_model = fit_cas(world, cfg.cas)
    trained = Trained(cas_model, build_category_dict(world.split("train")))
    if any(r.scorer == "ve" and r.use_qtd for r in cfg.ablation):
        say("training QTD")
        trained.qtd, trained.qtd_cv = fit_qtd(world, cfg.qtd)
    reports = []
    for row in cfg.ablation:
        plan = StrategyPlan.parse(row.strategy)
        if row.scorer == "none":
            rep = _report(world, trained, None, plan, NPrimePolicy(1, 1), None)
        else:
            key = (plan.train_strategy, row.ssl)
            if key not in trained.ve:
                say(f"training VE strategy={key[0]} ssl={key[1]}")
                trained.ve[key] = fit_ve(world, cas_model, cfg.ve, cfg.N, key[0], ssl=row.ssl)[0]
            policy = cfg.policy if row.use_qtd else NPrimePolicy(cfg.N, cfg.N)
            rep = _report(world, trained, trained.ve[key], plan, policy, trained.qtd if row.use_qtd else None)
        reports.append((row.name, rep))
    return pipeline.ablation_table(reports, baseline=_baseline(cfg)), reports, trained


def _baseline(cfg):
    for r in cfg.ablation:
        if r.scorer == "none":
            return r.name
    raise ConfigError("the ablation needs one CAS-only row (scorer = \"none\")")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
