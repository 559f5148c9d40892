import copy

import numpy as np
import pytest

from fclvit.data import make_benchmark
from fclvit.errors import ProtocolError
from fclvit.ewc import ConsolidationState
from fclvit.model import FCLViT, FCLViTConfig
from fclvit.tensor import Rng
from fclvit.trainer import (TrainConfig, ablate_tsb_run, continual_run, make_ablation_variant,
                            pretrain_backbone, train_task)

TINY = dict(depth=2, dim=16, heads=2, image_side=8, patch_side=4, channels=3)


@pytest.fixture(scope="module")
def bench():
    return make_benchmark(1, task_classes=4, base_classes=4, samples_per_class=20, image_side=8)


@pytest.fixture(scope="module")
def backbone(bench):
    m = FCLViT(FCLViTConfig(**TINY), Rng(1))
    acc = pretrain_backbone(m, bench[0], TrainConfig(pretrain_epochs=15, pretrain_lr=3e-3),
                            bench[1])
    return m, acc


def test_pretrain_beats_twice_chance_and_freezes(backbone):
    m, acc = backbone
    assert acc > 2 * (1 / 4)
    assert m.frozen and m.frozen_checksum == m.backbone_checksum()
    with pytest.raises(ProtocolError):
        pretrain_backbone(m, None, TrainConfig())


def test_train_task_needs_frozen_backbone(bench):
    m = FCLViT(FCLViTConfig(**TINY), Rng(0))
    k = m.add_task_head(bench[2][0].classes)
    with pytest.raises(ProtocolError):
        train_task(m, ConsolidationState(), bench[2][0].train, k, TrainConfig(epochs=1))


def test_first_task_loss_is_alpha_times_ce(backbone, bench):
    m = copy.deepcopy(backbone[0])
    k = m.add_task_head(bench[2][0].classes)
    seen = []

    def spy(model, loss, pen, ce, params):
        seen.append((loss.item(), pen.item(), ce.item(), sum(p.size for p in params)))

    train_task(m, ConsolidationState(), bench[2][0].train, k,
               TrainConfig(epochs=1, lam=0.0, alpha=0.7), on_step=spy)
    assert seen
    for loss, pen, ce, n in seen:
        assert pen == 0.0 and abs(loss - 0.7 * ce) < 1e-12
        assert n == 2 * 2 * 16 * 16 + 16 * 2


def test_later_task_loss_decomposes(backbone, bench):
    m = copy.deepcopy(backbone[0])
    split = bench[2]
    seen = []

    def spy(model, loss, pen, ce, params):
        seen.append((loss.item(), pen.item(), ce.item()))

    continual_run(m, split, TrainConfig(epochs=3, lam=50.0, alpha=2.0), on_step=spy)
    assert any(pen > 0 for _, pen, _ in seen)
    for loss, pen, ce in seen:
        assert abs(loss - (pen + 2.0 * ce)) < 1e-12


def test_eight_sample_overfit(backbone, bench):
    m = copy.deepcopy(backbone[0])
    task = bench[2][0]
    k = m.add_task_head(task.classes)
    idx = np.r_[np.flatnonzero(task.train.labels == task.classes[0])[:4],
                np.flatnonzero(task.train.labels == task.classes[1])[:4]]
    small = task.train.subset(idx)
    cfg = TrainConfig(epochs=200, batch_size=8, lr=3e-3)
    train_task(m, ConsolidationState(), small, k, cfg)
    from fclvit.metrics import top1
    assert top1(m, small, k) == 1.0


def test_heads_of_earlier_tasks_are_untouched(backbone, bench):
    m = copy.deepcopy(backbone[0])
    snaps = []
    continual_run(m, bench[2], TrainConfig(epochs=1),
                  on_task_end=lambda model, k: snaps.append(model.heads[k].layer.weight.data.copy()))
    assert np.array_equal(snaps[0], m.heads[0].layer.weight.data)


def test_single_task_run_and_determinism(backbone, bench):
    split = copy.deepcopy(bench[2])
    split.tasks = split.tasks[:1]
    cfg = TrainConfig(epochs=2)
    r1, _ = continual_run(copy.deepcopy(backbone[0]), split, cfg)
    r2, _ = continual_run(copy.deepcopy(backbone[0]), split, cfg)
    assert len(r1.tasks) == 1 and len(r1.tasks[0].accuracies) == 1
    assert r1.to_json() == r2.to_json()


def test_eval_only_at_end(backbone, bench):
    rec, _ = continual_run(copy.deepcopy(backbone[0]), bench[2],
                           TrainConfig(epochs=1, eval_every_task=False))
    assert [len(t.accuracies) for t in rec.tasks] == [0, 2]
    assert np.isnan(rec.summary().avg) and 0 <= rec.summary().last <= 1


def test_ablation_variant(backbone, bench):
    variant = make_ablation_variant(backbone[0])
    assert not variant.frozen and not variant.tsbs
    assert variant.backbone_checksum() == backbone[0].frozen_checksum
    rec, state = ablate_tsb_run(variant, bench[2], TrainConfig(epochs=1))
    n_backbone = sum(p.size for p in variant.backbone_params())
    assert rec.params == n_backbone + 16 * 4
    assert state.names == variant.consolidated_names() and "tab0.w_q" in state.names
    with pytest.raises(ProtocolError):
        ablate_tsb_run(copy.deepcopy(backbone[0]), bench[2], TrainConfig(epochs=1))


def test_config_guards():
    for bad in (dict(epochs=0), dict(alpha=-1), dict(lam=-1), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
