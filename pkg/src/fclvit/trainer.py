"""Sequential continual-learning loop: backbone pretraining, per-task training
of the feedback blocks and the new head, consolidation, evaluation."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ProtocolError
from .ewc import ConsolidationState, EwcConfig, consolidate, ewc_penalty
from .layers import Adam, Linear, cross_entropy
from .metrics import AccuracyMatrix, SummaryMetrics, summarize, top1
from .model import FCLViT
from .tensor import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Training recipe. ``epochs`` counts passes over each task's data."""

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    alpha: float = 1.0
    lam: float = 100.0
    seed: int = 0
    eval_every_task: bool = True
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    fisher_samples: int | None = None
    fisher_mode: str = "accumulate"
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def ewc(self):
        return EwcConfig(self.lam, self.fisher_samples, self.fisher_mode)


@dataclass
class TaskRecord:
    task_index: int
    classes: list
    epochs: int
    final_loss: float
    trainable_params: int
    accuracies: list = field(default_factory=list)
    losses: list = field(default_factory=list)


@dataclass
class RunRecord:
    tasks: list = field(default_factory=list)
    lam: float = 0.0
    alpha: float = 1.0
    params: int = 0

    @property
    def matrix(self):
        return AccuracyMatrix([t.accuracies for t in self.tasks])

    def summary(self):
        if any(not t.accuracies for t in self.tasks):
            # intermediate evaluations skipped: only Last is defined
            last = self.tasks[-1].accuracies
            return SummaryMetrics(float("nan"), sum(last) / len(last), [], self.params)
        return summarize(self.matrix, self.params)

    def to_json(self):
        s = self.summary()
        doc = {
            "lambda": self.lam, "alpha": self.alpha, "params": self.params,
            "avg": s.avg, "last": s.last, "forgetting": s.forgetting,
            "tasks": [{k: v for k, v in asdict(t).items() if k != "losses"} for t in self.tasks],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def batches(n, batch_size, rng: Rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield np.sort(order[i:i + batch_size])


def pretrain_backbone(model: FCLViT, base, config: TrainConfig, base_test=None):
    """Fit patch embedding, positions and TABs in single-pass mode with a
    throwaway classifier, then freeze them. Returns held-out accuracy when
    ``base_test`` is given."""
    if model.frozen:
        raise ProtocolError("backbone is already frozen")
    classes = sorted(set(base.labels.tolist()))
    lut = {c: i for i, c in enumerate(classes)}
    labels = np.array([lut[c] for c in base.labels.tolist()])
    rng = Rng(config.seed).child(9001)
    clf = Linear(model.config.dim, len(classes), rng=rng, name="pretrain_head")
    params = model.backbone_params() + clf.parameters()
    opt = Adam(params, lr=config.pretrain_lr)

    def logits_of(images):
        r = model.phase1_forward(model.patch_embed(images))
        return clf(r.mean(axis=-2))

    for epoch in range(config.pretrain_epochs):
        total = 0.0
        for idx in batches(len(labels), config.batch_size, rng.child(epoch)):
            opt.zero_grad()
            loss = cross_entropy(logits_of(base.images[idx]), labels[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch, total / len(labels))
    acc = None
    if base_test is not None:
        from .tensor import no_grad
        with no_grad():
            pred = np.argmax(logits_of(base_test.images).data, axis=1)
        acc = float(np.mean(pred == np.array([lut[c] for c in base_test.labels.tolist()])))
    for p in params:
        p.grad = None
    model.freeze()
    return acc


def make_ablation_variant(model: FCLViT) -> FCLViT:
    """Copy of ``model``'s backbone with no feedback blocks and every backbone
    weight trainable again."""
    cfg = copy.deepcopy(model.config)
    cfg.use_tsb = False
    variant = copy.deepcopy(model)
    variant.config = cfg
    variant.tsbs = []
    variant.heads = []
    for p in variant.backbone_params():
        p.requires_grad = True
    variant.frozen = False
    variant.frozen_checksum = None
    return variant


def step_loss(model, state, images, labels, k, config: TrainConfig, rng):
    """(total, penalty, cross-entropy) for one batch: L = L_c + alpha * L_h."""
    logits = model.full_forward(images, k, rng=rng, training=True)
    ce = cross_entropy(logits, labels)
    pen = ewc_penalty(model.consolidated_params(), state, config.lam)
    return pen + ce * config.alpha, pen, ce


def train_task(model: FCLViT, state: ConsolidationState, train, k, config: TrainConfig,
               on_step=None) -> TaskRecord:
    if model.config.use_tsb and not model.frozen:
        raise ProtocolError("train the feedback blocks only after the backbone is frozen")
    head = model.heads[k]
    labels = head.local_labels(train.labels)
    images = train.images
    params = model.trainable_params(k)
    opt = Adam(params, lr=config.lr)
    task_rng = Rng(config.seed).child(k)
    losses = []
    loss_val = float("nan")
    for epoch in range(config.epochs):
        epoch_rng = task_rng.child(epoch)
        drop_rng = epoch_rng.child(1)
        total = 0.0
        for idx in batches(len(labels), config.batch_size, epoch_rng):
            opt.zero_grad()
            loss, pen, ce = step_loss(model, state, images[idx], labels[idx], k, config, drop_rng)
            if on_step is not None:
                on_step(model, loss, pen, ce, params)
            loss.backward()
            opt.step()
            loss_val = loss.item()
            total += loss_val * len(idx)
        losses.append(total / len(labels))
    opt.zero_grad()
    log.info("task %d done, final epoch loss %.4f", k, losses[-1])
    return TaskRecord(k, list(head.class_list), config.epochs, losses[-1],
                      int(sum(p.size for p in params)), losses=losses)


def continual_run(model: FCLViT, split, config: TrainConfig, state=None, on_step=None,
                  on_task_end=None):
    """Learn the tasks of ``split`` one after another. Only the current task's
    training set is touched while training; earlier test sets are used for
    evaluation only. Returns (RunRecord, ConsolidationState)."""
    state = state or ConsolidationState()
    ewc_cfg = config.ewc()
    record = RunRecord(lam=config.lam, alpha=config.alpha)
    test_sets = []
    for task in split:
        k = model.add_task_head(task.classes)
        train = task.train
        rec = train_task(model, state, train, k, config, on_step=on_step)
        state = consolidate(model, state, train.images, model.heads[k].local_labels(train.labels),
                            k, ewc_cfg, rng=Rng(config.seed).child(k, 77))
        del train
        test_sets.append(task.test)
        if model.frozen and model.backbone_checksum() != model.frozen_checksum:
            raise ProtocolError("frozen backbone changed during training")
        if config.eval_every_task or len(test_sets) == len(split):
            rec.accuracies = [top1(model, ts, j, threads=config.threads)
                              for j, ts in enumerate(test_sets)]
        record.tasks.append(rec)
        if on_task_end is not None:
            on_task_end(model, k)
    record.params = model.param_census()
    return record, state


def ablate_tsb_run(variant: FCLViT, split, config: TrainConfig, **kw):
    """Same loop on the no-feedback variant: EWC over every backbone weight."""
    if variant.config.use_tsb:
        raise ProtocolError("ablation run expects a model built without feedback blocks")
    return continual_run(variant, split, config, **kw)
