"""Two-pass feedback vision transformer assembly."""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import TABWeights, tab_forward_cross, tab_forward_self
from .errors import ConfigError, ContractError, DimensionError, ProtocolError
from .feedback import TSBWeights, tsb_chain
from .layers import Linear
from .tensor import Rng, Tensor, matmul, no_grad, parameter


@dataclass
class FCLViTConfig:
    """Architecture hyper-parameters.

    ``use_tsb=False`` builds the ablation variant: a single-pass ViT whose
    whole backbone stays trainable.
    """

    depth: int = 4
    dim: int = 64
    heads: int = 4
    dropout: float = 0.5
    image_side: int = 16
    patch_side: int = 4
    channels: int = 3
    vit_subblocks: bool = True
    pooled_feedback: bool = False
    use_tsb: bool = True
    tsb_init: str = "identity"

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be at least 1")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.patch_side < 1 or self.image_side % self.patch_side:
            raise ConfigError(
                f"image side {self.image_side} not divisible by patch side {self.patch_side}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        if self.channels < 1:
            raise ConfigError("channels must be positive")

    @property
    def tokens(self):
        return (self.image_side // self.patch_side) ** 2

    @property
    def patch_dim(self):
        return self.channels * self.patch_side ** 2

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def base_scale(cls, **overrides):
        """ViT-Base geometry (12 x 768, 12 heads, 224px / 16px patches)."""
        base = dict(depth=12, dim=768, heads=12, dropout=0.5, image_side=224, patch_side=16)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TaskHead:
    task_index: int
    class_list: tuple
    layer: Linear

    def local_labels(self, global_labels):
        lut = {c: i for i, c in enumerate(self.class_list)}
        try:
            return np.array([lut[int(y)] for y in global_labels], dtype=np.int64)
        except KeyError as e:
            raise ProtocolError(f"label {e.args[0]} is not a class of task {self.task_index}") from None


def patchify(images, patch_side):
    """(B, C, H, W) -> (B, N, C*ps*ps); patches row-major over the grid, each
    flattened channel-major then row-major."""
    b, c, hgt, wid = images.shape
    gh, gw = hgt // patch_side, wid // patch_side
    x = images.reshape(b, c, gh, patch_side, gw, patch_side)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch_side * patch_side)


class FCLViT:
    def __init__(self, config: FCLViTConfig, rng: Rng):
        self.config = config
        cfg = config
        self.patch_proj = Linear(cfg.patch_dim, cfg.dim, bias=True, rng=rng, name="patch")
        self.pos_embed = parameter(rng.normal((cfg.tokens, cfg.dim), 0.0, 0.02), name="pos_embed")
        self.tabs = [TABWeights.init(cfg.dim, cfg.heads, rng, cfg.vit_subblocks, prefix=f"tab{j}")
                     for j in range(cfg.depth)]
        if cfg.use_tsb:
            self.tsbs = [TSBWeights.init(cfg.dim, cfg.dropout, rng, cfg.tsb_init, prefix=f"tsb{j}")
                         for j in range(cfg.depth)]
        else:
            self.tsbs = []
        self.heads: list[TaskHead] = []
        self.frozen = False
        self.frozen_checksum = None

    # parameter groups --------------------------------------------------------------

    def backbone_params(self):
        ps = self.patch_proj.parameters() + [self.pos_embed]
        for t in self.tabs:
            ps.extend(t.parameters())
        return ps

    def tsb_params(self):
        return [p for w in self.tsbs for p in w.parameters()]

    def head_params(self, k):
        return self._head(k).layer.parameters()

    def consolidated_params(self):
        """Parameters the EWC penalty covers: the TSBs, or the whole backbone
        for the no-feedback variant."""
        return self.tsb_params() if self.config.use_tsb else self.backbone_params()

    def trainable_params(self, k):
        return self.consolidated_params() + self.head_params(k)

    def named_parameters(self):
        out = {"patch.weight": self.patch_proj.weight, "patch.bias": self.patch_proj.bias,
               "pos_embed": self.pos_embed}
        for j, t in enumerate(self.tabs):
            for n in TABWeights.param_names():
                out[f"tab{j}.{n}"] = getattr(t, n)
        for j, w in enumerate(self.tsbs):
            out[f"tsb{j}.h1"] = w.h1
            out[f"tsb{j}.h2"] = w.h2
        for h in self.heads:
            out[f"head{h.task_index}.weight"] = h.layer.weight
        return out

    def consolidated_names(self):
        ids = {id(p) for p in self.consolidated_params()}
        return [n for n, p in self.named_parameters().items() if id(p) in ids]

    def param_census(self):
        """Trainable parameter count across the continual phase: consolidated
        params plus every task head."""
        n = sum(p.size for p in self.consolidated_params())
        return n + sum(h.layer.weight.size for h in self.heads)

    def backbone_checksum(self):
        h = hashlib.sha256()
        for p in self.backbone_params():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def freeze(self):
        if self.frozen:
            raise ProtocolError("backbone already frozen")
        for p in self.backbone_params():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        self.frozen_checksum = self.backbone_checksum()

    # forward stages ----------------------------------------------------------------

    def patch_embed(self, images) -> Tensor:
        cfg = self.config
        x = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        expect = (cfg.channels, cfg.image_side, cfg.image_side)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise DimensionError(f"expected images of shape (B, {expect}), got {x.shape}")
        p = self.patch_proj(Tensor(patchify(x, cfg.patch_side))) + self.pos_embed
        return p.reshape(*p.shape[1:]) if single else p

    def phase1_forward(self, p: Tensor, trace=None) -> Tensor:
        """Generic features r: self-attention through every TAB. Untracked once
        the backbone is frozen."""
        if self.frozen:
            with no_grad():
                return self._phase1(p.detach(), trace)
        return self._phase1(p, trace)

    def _phase1(self, f, trace):
        for tab in self.tabs:
            f = tab_forward_self(tab, f)
            if trace is not None:
                trace["tab"] += 1
        return f

    def feedback(self, r: Tensor, rng, training, trace=None):
        return tsb_chain(self.tsbs, r, rng, training, pooled=self.config.pooled_feedback,
                         trace=trace)

    def phase2_forward(self, p: Tensor, fb, trace=None) -> Tensor:
        """Task-specific features z: the same TABs re-run on p, each attending
        to its depth's feedback tokens."""
        if len(fb) != len(self.tabs):
            raise ContractError(f"feedback bundle has {len(fb)} entries for depth {len(self.tabs)}")
        f = p
        for tab, g in zip(self.tabs, fb):
            f = tab_forward_cross(tab, f, g)
            if trace is not None:
                trace["tab"] += 1
        return f

    def _head(self, k):
        if not 0 <= k < len(self.heads):
            raise LookupError(f"no head for task {k}; {len(self.heads)} heads exist")
        return self.heads[k]

    def classify(self, z: Tensor, k: int) -> Tensor:
        pooled = z.mean(axis=-2)
        single = pooled.ndim == 1
        if single:
            pooled = pooled.reshape(1, -1)
        logits = matmul(pooled, self._head(k).layer.weight.T)
        return logits.reshape(-1) if single else logits

    def features(self, images, rng=None, training=False, trace=None) -> Tensor:
        p = self.patch_embed(images)
        r = self.phase1_forward(p, trace)
        if not self.config.use_tsb:
            return r
        fb = self.feedback(r, rng, training, trace)
        if self.frozen:
            p = p.detach()
        return self.phase2_forward(p, fb, trace)

    def full_forward(self, images, k, rng=None, training=False, trace=None) -> Tensor:
        self._head(k)
        return self.classify(self.features(images, rng, training, trace), k)

    def count_evaluations(self, images, k):
        trace = Counter()
        with no_grad():
            self.full_forward(images, k, trace=trace)
        return trace

    # heads ---------------------------------------------------------------------------

    def add_task_head(self, class_list) -> int:
        classes = tuple(int(c) for c in class_list)
        if not classes or len(set(classes)) != len(classes):
            raise ProtocolError("a task needs a non-empty list of distinct classes")
        taken = set(self.all_classes())
        clash = taken.intersection(classes)
        if clash:
            raise ProtocolError(f"classes {sorted(clash)} already belong to an earlier task")
        k = len(self.heads)
        layer = Linear(self.config.dim, len(classes), bias=False, init="zeros", name=f"head{k}")
        self.heads.append(TaskHead(k, classes, layer))
        return k

    def all_classes(self):
        return [c for h in self.heads for c in h.class_list]

    def task_agnostic_classify(self, z: Tensor):
        """Max logit over every head; ties go to the lower task index, then the
        lower class position. Returns (task_index, global class)."""
        if not self.heads:
            raise LookupError("no task heads")
        best = None
        for h in self.heads:
            logits = self.classify(z, h.task_index).data
            if logits.ndim != 1:
                raise DimensionError("task-agnostic classification takes one sample")
            i = int(np.argmax(logits))
            if best is None or logits[i] > best[0]:
                best = (logits[i], h.task_index, h.class_list[i])
        return best[1], best[2]
