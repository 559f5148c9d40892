"""Experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

import copy
import dataclasses
import logging

import numpy as np

from .config import ExperimentConfig
from .data import load_raw_images, make_benchmark, read_manifest, split_tasks
from .errors import ConfigError
from .model import FCLViT
from .tensor import Rng
from .trainer import (ablate_tsb_run, continual_run, make_ablation_variant,
                      pretrain_backbone)

log = logging.getLogger(__name__)


def load_benchmark(cfg: ExperimentConfig):
    """(base_train, base_test, task split) for the configured data source."""
    d = cfg.data
    seed = cfg.effective_data_seed()
    if d.source == "synthetic":
        return make_benchmark(seed, d.task_classes, d.classes_per_task, d.base_classes,
                              d.samples_per_class, cfg.model.image_side, cfg.model.channels,
                              d.noise)
    if not d.manifest:
        raise ConfigError("source = manifest needs a 'manifest' path")
    man = read_manifest(d.manifest)
    if (man.channels, man.height, man.width) != (
            cfg.model.channels, cfg.model.image_side, cfg.model.image_side):
        raise ConfigError("manifest image dims disagree with the model config")
    data = load_raw_images(man.path, man)
    base = data.select_classes(range(d.base_classes))
    rest = data.select_classes(range(d.base_classes, d.base_classes + d.task_classes))
    if len(base) == 0 or len(rest) == 0:
        raise ConfigError("manifest data does not contain the configured base/task classes")
    perm = Rng(seed).child(7).permutation(len(base))
    cut = int(0.8 * len(base))
    return (base.subset(np.sort(perm[:cut])), base.subset(np.sort(perm[cut:])),
            split_tasks(rest, d.classes_per_task, seed))


def pretrained_model(cfg: ExperimentConfig, base_train, base_test=None):
    model = FCLViT(cfg.model, Rng(cfg.train.seed))
    acc = pretrain_backbone(model, base_train, cfg.train, base_test)
    log.info("backbone pretrained, held-out base accuracy %s", acc)
    return model, acc


def with_lambda(cfg: ExperimentConfig, lam):
    out = copy.deepcopy(cfg)
    out.train = dataclasses.replace(cfg.train, lam=float(lam))
    return out


def run_experiment(cfg: ExperimentConfig, backbone=None, bench=None):
    """Full continual run at lambda = cfg.train.lam * cfg.lambda_scale.
    Returns (RunRecord, ConsolidationState, model)."""
    base_train, base_test, split = bench or load_benchmark(cfg)
    if backbone is None:
        backbone, _ = pretrained_model(cfg, base_train, base_test)
    model = copy.deepcopy(backbone)
    record, state = continual_run(model, split, effective_train(cfg))
    return record, state, model


def effective_train(cfg: ExperimentConfig):
    return with_lambda(cfg, cfg.train.lam * cfg.lambda_scale).train


def lambda_sweep(cfg: ExperimentConfig, lambdas, backbone=None, bench=None):
    """One continual run per lambda (each multiplied by ``cfg.lambda_scale``),
    all starting from the same pretrained backbone. Returns [(lam, RunRecord)]."""
    base_train, base_test, split = bench or load_benchmark(cfg)
    if backbone is None:
        backbone, _ = pretrained_model(cfg, base_train, base_test)
    out = []
    for lam in lambdas:
        eff = float(lam) * cfg.lambda_scale
        record, _ = continual_run(copy.deepcopy(backbone), split, with_lambda(cfg, eff).train)
        log.info("lambda %g: last %.4f", eff, record.summary().last)
        out.append((eff, record))
    return out


def tsb_ablation(cfg: ExperimentConfig, backbone=None, bench=None):
    """Matched pair from one pretrained backbone: feedback model with EWC on
    the TSBs vs. no-feedback ViT with EWC on every backbone weight."""
    base_train, base_test, split = bench or load_benchmark(cfg)
    if backbone is None:
        backbone, _ = pretrained_model(cfg, base_train, base_test)
    train_cfg = effective_train(cfg)
    fcl, _ = continual_run(copy.deepcopy(backbone), split, train_cfg)
    plain, _ = ablate_tsb_run(make_ablation_variant(backbone), split, train_cfg)
    return fcl, plain
