"""A small Vision Transformer whose d x d blocks can carry factorized increments.

Every transformer layer owns twelve ``d x d`` blocks: ``W_q, W_k, W_v, W_o``,
four column blocks of ``W_up`` (``d x 4d``) and four row blocks of
``W_down`` (``4d x d``). A :class:`TensorizationMap` orders a subset of them
into the slices of one increment tensor; a :class:`~fact.factorization.FactorSet`
over those slices is added on the fly during the forward pass.

Staged backbones (hidden size changing between stages) get one map and one
factor set per stage. Stages are joined by a 2x2 token merge; a layer norm
plus a frozen projection then maps the merged tokens to the next width.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from fact import factorization as fz
from fact import tensor as T
from fact.tensor import AutoTensor, ShapeError

STRATEGIES = ("all", "mhsa", "ffn", "qv")
STRATEGY_TAGS = {"all": 0, "mhsa": 1, "ffn": 2, "qv": 3}
FFN_BLOCKS = 4
_ROLES = {
    "all": [("q", 0), ("k", 0), ("v", 0), ("o", 0)]
    + [("up", b) for b in range(FFN_BLOCKS)]
    + [("down", b) for b in range(FFN_BLOCKS)],
    "mhsa": [("q", 0), ("k", 0), ("v", 0), ("o", 0)],
    "ffn": [("up", b) for b in range(FFN_BLOCKS)] + [("down", b) for b in range(FFN_BLOCKS)],
    "qv": [("q", 0), ("v", 0)],
}


@dataclass(frozen=True)
class StageSpec:
    layers: int
    dim: int
    heads: int


@dataclass
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    num_classes: int = 4
    stages: list = field(default_factory=lambda: [StageSpec(2, 32, 4)])
    pool: str = "cls"

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages]
        if self.image_size % self.patch_size:
            raise ShapeError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.pool not in ("cls", "mean"):
            raise ValueError(f"pool must be 'cls' or 'mean', got {self.pool!r}")
        if len(self.stages) > 1 and self.pool != "mean":
            raise ValueError("staged backbones pool by mean; set pool='mean'")
        grid = self.grid
        for i, s in enumerate(self.stages):
            if s.layers < 1 or s.dim < 1 or s.heads < 1 or s.dim % s.heads:
                raise ValueError(f"stage {i}: invalid spec {s}")
            if i < len(self.stages) - 1:
                if grid % 2:
                    raise ShapeError(f"stage {i}: token grid {grid} cannot be merged 2x2")
                grid //= 2

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def depth(self):
        return sum(s.layers for s in self.stages)

    def to_dict(self):
        return {
            "image_size": self.image_size, "patch_size": self.patch_size,
            "channels": self.channels, "num_classes": self.num_classes, "pool": self.pool,
            "stages": [[s.layers, s.dim, s.heads] for s in self.stages],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["image_size"], d["patch_size"], d["channels"], d["num_classes"],
                   [StageSpec(*s) for s in d["stages"]], d["pool"])


def vit_config(L, d, heads, image_size=16, patch_size=4, channels=3, num_classes=4, pool="cls"):
    """Plain (single-stage) ViT configuration."""
    return ViTConfig(image_size, patch_size, channels, num_classes, [StageSpec(L, d, heads)], pool)


# --------------------------------------------------------------------------
# weight layout
# --------------------------------------------------------------------------


def _layer_prefix(stage, layer):
    return f"stages.{stage}.layers.{layer}."


def weight_shapes(config):
    """Ordered ``name -> shape`` manifest of every backbone weight."""
    shapes = OrderedDict()
    d0 = config.stages[0].dim
    n_tokens = config.grid**2 + (1 if config.pool == "cls" else 0)
    shapes["patch_embed.weight"] = (config.channels * config.patch_size**2, d0)
    shapes["patch_embed.bias"] = (d0,)
    if config.pool == "cls":
        shapes["cls_token"] = (d0,)
    shapes["pos_embed"] = (n_tokens, d0)
    for s, spec in enumerate(config.stages):
        d = spec.dim
        for j in range(spec.layers):
            p = _layer_prefix(s, j)
            shapes[p + "norm1.gamma"] = (d,)
            shapes[p + "norm1.beta"] = (d,)
            for role in ("q", "k", "v", "o"):
                shapes[p + f"attn.{role}"] = (d, d)
                shapes[p + f"attn.{role}_bias"] = (d,)
            shapes[p + "norm2.gamma"] = (d,)
            shapes[p + "norm2.beta"] = (d,)
            shapes[p + "mlp.up"] = (d, FFN_BLOCKS * d)
            shapes[p + "mlp.up_bias"] = (FFN_BLOCKS * d,)
            shapes[p + "mlp.down"] = (FFN_BLOCKS * d, d)
            shapes[p + "mlp.down_bias"] = (d,)
        if s < len(config.stages) - 1:
            d_next = config.stages[s + 1].dim
            shapes[f"merges.{s}.norm.gamma"] = (4 * d,)
            shapes[f"merges.{s}.norm.beta"] = (4 * d,)
            shapes[f"merges.{s}.proj"] = (4 * d, d_next)
            shapes[f"merges.{s}.proj_bias"] = (d_next,)
    d_last = config.stages[-1].dim
    shapes["norm.gamma"] = (d_last,)
    shapes["norm.beta"] = (d_last,)
    shapes["head.weight"] = (d_last, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


HEAD_NAMES = ("head.weight", "head.bias")


def dense_param_count(config, include_head=False):
    """Backbone parameter count computed from shapes alone (nothing allocated)."""
    return sum(
        math.prod(shape) for name, shape in weight_shapes(config).items()
        if include_head or name not in HEAD_NAMES
    )


def init_weights(config, seed=0):
    """Random backbone: Xavier-uniform matrices, zero biases, unit norms, zero head."""
    rng = np.random.default_rng(seed)
    weights = OrderedDict()
    for name, shape in weight_shapes(config).items():
        if name.startswith("head."):
            arr = np.zeros(shape)
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        elif name.endswith("beta") or name.endswith("bias"):
            arr = np.zeros(shape)
        elif name in ("pos_embed", "cls_token"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-bound, bound, size=shape)
        weights[name] = arr.astype(np.float32)
    return weights


# --------------------------------------------------------------------------
# tensorization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SliceEntry:
    layer: int
    role: str
    block: int = 0


@dataclass
class TensorizationMap:
    strategy: str
    layers: int
    d: int
    entries: list

    def __post_init__(self):
        self._index = {(e.layer, e.role, e.block): i for i, e in enumerate(self.entries)}

    @property
    def M(self):
        return len(self.entries)

    def index_of(self, layer, role, block=0):
        return self._index.get((layer, role, block))

    def covers(self, layer, role):
        return (layer, role, 0) in self._index


def slices_per_layer(strategy):
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown tensorization strategy {strategy!r}; expected {STRATEGIES}")
    return len(_ROLES[strategy])


def build_tensorization_map(layers, d, strategy="all"):
    """Slice order: per layer ``q, k, v, o, up(1..4), down(1..4)`` filtered by strategy."""
    slices_per_layer(strategy)
    entries = [SliceEntry(j, role, b) for j in range(layers) for role, b in _ROLES[strategy]]
    return TensorizationMap(strategy, layers, d, entries)


def block_view(weights, stage, entry, d):
    """Writable ``d x d`` numpy view of one tensorized block."""
    p = _layer_prefix(stage, entry.layer)
    if entry.role in ("q", "k", "v", "o"):
        return weights[p + f"attn.{entry.role}"]
    b = entry.block
    if entry.role == "up":
        return weights[p + "mlp.up"][:, b * d:(b + 1) * d]
    return weights[p + "mlp.down"][b * d:(b + 1) * d, :]


def gather_slices(weights, stage, tmap):
    return [block_view(weights, stage, e, tmap.d).copy() for e in tmap.entries]


def scatter_slices(weights, stage, tmap, blocks):
    for e, blk in zip(tmap.entries, blocks):
        block_view(weights, stage, e, tmap.d)[...] = blk


@dataclass
class StageAdapter:
    tmap: TensorizationMap
    factors: fz.FactorSet

    def contract(self, layer, role, block, x, transpose=False):
        i = self.tmap.index_of(layer, role, block)
        if i is None:
            return None
        return fz.contract_forward(self.factors, i, x, transpose=transpose)


@dataclass
class StagePartition:
    """One optional adapter per backbone stage."""

    adapters: list

    @property
    def fmt(self):
        return next(a.factors.fmt for a in self.adapters if a is not None)

    @property
    def strategy(self):
        return next(a.tmap.strategy for a in self.adapters if a is not None)

    def parameters(self):
        return [p for a in self.adapters if a is not None for p in a.factors.parameters()]

    def trainable_count(self):
        return sum(a.factors.trainable_count() for a in self.adapters if a is not None)

    def copy(self):
        return StagePartition([
            None if a is None else StageAdapter(a.tmap, a.factors.copy()) for a in self.adapters
        ])

    def astype(self, dtype):
        return StagePartition([
            None if a is None else StageAdapter(a.tmap, a.factors.astype(dtype))
            for a in self.adapters
        ])


def make_partition(config, fmt, ranks, scale=1.0, strategy="all", seed=0):
    """Independently initialized factor set for every stage of ``config``."""
    adapters = []
    for s, spec in enumerate(config.stages):
        tmap = build_tensorization_map(spec.layers, spec.dim, strategy)
        factors = fz.init_factors(fmt, tmap.M, spec.dim, ranks, scale, seed=seed + 1009 * s)
        adapters.append(StageAdapter(tmap, factors))
    return StagePartition(adapters)


def partition_shapes(stages, strategy="all"):
    """Increment tensor shape ``(M, d, d)`` per stage; pure shape arithmetic."""
    out = []
    for spec in stages:
        layers, dim = (spec.layers, spec.dim) if isinstance(spec, StageSpec) else spec[:2]
        out.append((slices_per_layer(strategy) * layers, dim, dim))
    return out


def partition_param_count(stages, fmt, ranks, strategy="all"):
    return sum(fz.param_count(fmt, M, d, ranks) for M, d, _ in partition_shapes(stages, strategy))


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


def _proj(x2, w, b, adapter, layer, role, transpose=False):
    out = T.matmul(x2, T.transpose(w) if transpose else w)
    if adapter is not None:
        extra = adapter.contract(layer, role, 0, x2, transpose=transpose)
        if extra is not None:
            out = T.add(out, extra)
    return T.add_bias(out, b)


class VisionTransformer:
    """Backbone weights as :class:`AutoTensor` leaves plus the forward pass."""

    def __init__(self, config, weights):
        self.config = config
        expected = weight_shapes(config)
        missing = [k for k in expected if k not in weights]
        if missing:
            raise ShapeError(f"missing weights: {missing[:5]}")
        self.params = OrderedDict()
        for name, shape in expected.items():
            arr = np.asarray(weights[name])
            if arr.shape != tuple(shape):
                raise ShapeError(f"weight {name}: shape {arr.shape}, expected {tuple(shape)}")
            self.params[name] = AutoTensor(arr.copy())

    @classmethod
    def random(cls, config, seed=0):
        return cls(config, init_weights(config, seed))

    def __getitem__(self, name):
        return self.params[name]

    def state_dict(self):
        return OrderedDict((k, v.data) for k, v in self.params.items())

    def copy(self):
        out = VisionTransformer(self.config, self.state_dict())
        for k, v in self.params.items():
            out.params[k].requires_grad = v.requires_grad
        return out

    def with_head(self, num_classes):
        """Copy with a fresh zero head for ``num_classes`` outputs."""
        cfg = ViTConfig.from_dict({**self.config.to_dict(), "num_classes": num_classes})
        weights = OrderedDict((k, v.copy()) for k, v in self.state_dict().items())
        d_last = cfg.stages[-1].dim
        weights["head.weight"] = np.zeros((d_last, num_classes), dtype=np.float32)
        weights["head.bias"] = np.zeros(num_classes, dtype=np.float32)
        return VisionTransformer(cfg, weights)

    def astype(self, dtype):
        out = self.copy()
        for k, v in out.params.items():
            out.params[k] = AutoTensor(v.data.astype(dtype), requires_grad=v.requires_grad)
        return out

    def set_trainable(self, which):
        """``which`` is one of ``none``/``head``/``all``."""
        for name, p in self.params.items():
            p.requires_grad = which == "all" or (which == "head" and name in HEAD_NAMES)
            p.zero_grad()

    def trainable_parameters(self):
        return [p for p in self.params.values() if p.requires_grad]

    def head_parameters(self):
        return [self.params[n] for n in HEAD_NAMES]

    def head_size(self):
        return sum(self.params[n].data.size for n in HEAD_NAMES)

    # ------------------------------------------------------------ blocks

    def mhsa(self, x, stage, layer, adapter=None):
        """Multi-head self-attention on ``x`` (``B x N x d`` or ``N x d``)."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, N, d = x.shape
        spec = self.config.stages[stage]
        if d != spec.dim:
            raise ShapeError(f"stage {stage} layer {layer}: input dim {d} != {spec.dim}")
        if adapter is not None and adapter.tmap.d != d:
            raise ShapeError(f"stage {stage}: adapter dim {adapter.tmap.d} != model dim {d}")
        H, dh = spec.heads, d // spec.heads
        p = _layer_prefix(stage, layer) + "attn."
        x2 = T.reshape(x, (B * N, d))

        def heads(role):
            t = _proj(x2, self.params[p + role], self.params[p + role + "_bias"], adapter, layer, role)
            return T.transpose(T.reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax_rows(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B * N, d))
        # output projection is ctx @ W_o^T
        out = _proj(ctx, self.params[p + "o"], self.params[p + "o_bias"], adapter, layer, "o",
                    transpose=True)
        return T.reshape(out, (N, d) if squeeze else (B, N, d))

    def ffn(self, x, stage, layer, adapter=None, mode="monolithic"):
        """Feed-forward block; ``mode='per_block'`` evaluates the four-head sum form."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, N, d = x.shape
        if d != self.config.stages[stage].dim:
            raise ShapeError(f"stage {stage} layer {layer}: input dim {d} mismatch")
        p = _layer_prefix(stage, layer) + "mlp."
        w_up, b_up = self.params[p + "up"], self.params[p + "up_bias"]
        w_down, b_down = self.params[p + "down"], self.params[p + "down_bias"]
        x2 = T.reshape(x, (B * N, d))

        def up_extra(block, inp):
            return None if adapter is None else adapter.contract(layer, "up", block, inp)

        def down_extra(block, inp):
            return None if adapter is None else adapter.contract(layer, "down", block, inp)

        if mode == "monolithic":
            pre = T.matmul(x2, w_up)
            ups = [up_extra(b, x2) for b in range(FFN_BLOCKS)]
            if any(u is not None for u in ups):
                pre = T.add(pre, T.concat(ups, axis=1))
            act = T.gelu(T.add_bias(pre, b_up))
            terms = [T.matmul(act, w_down)]
            for b in range(FFN_BLOCKS):
                if adapter is None:
                    break
                extra = down_extra(b, T.narrow(act, 1, b * d, (b + 1) * d))
                if extra is not None:
                    terms.append(extra)
        elif mode == "per_block":
            terms = []
            for b in range(FFN_BLOCKS):
                cols = (b * d, (b + 1) * d)
                pre = T.matmul(x2, T.narrow(w_up, 1, *cols))
                extra = up_extra(b, x2)
                if extra is not None:
                    pre = T.add(pre, extra)
                act = T.gelu(T.add_bias(pre, T.narrow(b_up, 0, *cols)))
                terms.append(T.matmul(act, T.narrow(w_down, 0, *cols)))
                extra = down_extra(b, act)
                if extra is not None:
                    terms.append(extra)
        else:
            raise ValueError(f"unknown ffn mode {mode!r}")
        out = T.add_bias(T.add_n(terms) if len(terms) > 1 else terms[0], b_down)
        return T.reshape(out, (N, d) if squeeze else (B, N, d))

    def block(self, x, stage, layer, adapter=None, ffn_mode="monolithic"):
        p = _layer_prefix(stage, layer)
        h = T.layer_norm(x, self.params[p + "norm1.gamma"], self.params[p + "norm1.beta"])
        x = T.add(x, self.mhsa(h, stage, layer, adapter))
        h = T.layer_norm(x, self.params[p + "norm2.gamma"], self.params[p + "norm2.beta"])
        return T.add(x, self.ffn(h, stage, layer, adapter, ffn_mode))

    # ----------------------------------------------------------- forward

    def patchify(self, images):
        images = np.asarray(images.data if isinstance(images, AutoTensor) else images)
        c, size, ps = self.config.channels, self.config.image_size, self.config.patch_size
        if images.ndim != 4 or images.shape[1:] != (c, size, size):
            raise ShapeError(f"images must be B x {c} x {size} x {size}, got {images.shape}")
        B, g = images.shape[0], size // ps
        patches = images.reshape(B, c, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
        return patches.reshape(B * g * g, c * ps * ps).astype(self.params["pos_embed"].dtype)

    def _merge_tokens(self, x, s, grid):
        B, _, d = x.shape
        half = grid // 2
        x = T.reshape(x, (B, half, 2, half, 2, d))
        x = T.reshape(T.transpose(x, (0, 1, 3, 2, 4, 5)), (B * half * half, 4 * d))
        x = T.layer_norm(x, self.params[f"merges.{s}.norm.gamma"], self.params[f"merges.{s}.norm.beta"])
        x = T.add_bias(T.matmul(x, self.params[f"merges.{s}.proj"]), self.params[f"merges.{s}.proj_bias"])
        return T.reshape(x, (B, half * half, self.config.stages[s + 1].dim))

    def features(self, images, partition=None, ffn_mode="monolithic"):
        """Pooled, normalized representation fed to the head (``B x d_last``)."""
        cfg = self.config
        adapters = _adapters_for(cfg, partition)
        patches = AutoTensor(self.patchify(images))
        B = patches.shape[0] // cfg.grid**2
        d0 = cfg.stages[0].dim
        x = T.add_bias(T.matmul(patches, self.params["patch_embed.weight"]), self.params["patch_embed.bias"])
        x = T.reshape(x, (B, cfg.grid**2, d0))
        if cfg.pool == "cls":
            cls = T.reshape(T.expand_batch(self.params["cls_token"], B), (B, 1, d0))
            x = T.concat([cls, x], axis=1)
        x = T.add(x, T.expand_batch(self.params["pos_embed"], B))
        grid = cfg.grid
        for s, spec in enumerate(cfg.stages):
            for j in range(spec.layers):
                try:
                    x = self.block(x, s, j, adapters[s], ffn_mode)
                except ShapeError as exc:
                    raise ShapeError(f"stage {s} layer {j}: {exc}") from exc
            if s < len(cfg.stages) - 1:
                x = self._merge_tokens(x, s, grid)
                grid //= 2
        x = T.layer_norm(x, self.params["norm.gamma"], self.params["norm.beta"])
        if cfg.pool == "cls":
            return T.reshape(T.narrow(x, 1, 0, 1), (B, cfg.stages[-1].dim))
        return T.mean(x, axis=1)

    def head(self, feats):
        return T.add_bias(T.matmul(feats, self.params["head.weight"]), self.params["head.bias"])

    def forward(self, images, partition=None, ffn_mode="monolithic"):
        """Logits ``B x classes``; ``partition`` adds factorized increments."""
        return self.head(self.features(images, partition, ffn_mode))

    __call__ = forward


def _adapters_for(config, partition):
    n = len(config.stages)
    if partition is None:
        return [None] * n
    if isinstance(partition, StageAdapter):
        partition = StagePartition([partition])
    if len(partition.adapters) != n:
        raise ShapeError(f"partition has {len(partition.adapters)} stages, model has {n}")
    for s, (a, spec) in enumerate(zip(partition.adapters, config.stages)):
        if a is None:
            continue
        if a.tmap.d != spec.dim or a.factors.d != spec.dim:
            raise ShapeError(f"stage {s}: factor dim {a.factors.d} != model dim {spec.dim}")
        if a.tmap.layers != spec.layers or a.factors.M != a.tmap.M:
            raise ShapeError(f"stage {s}: map covers {a.tmap.layers} layers / M={a.factors.M}, "
                             f"model stage has {spec.layers} layers")
    return partition.adapters


def merge_partition(model, partition):
    """Dense copy of ``model`` with every increment absorbed into its weights."""
    weights = OrderedDict((k, v.copy()) for k, v in model.state_dict().items())
    for s, a in enumerate(_adapters_for(model.config, partition)):
        if a is None:
            continue
        blocks = fz.merge_into(a.factors, gather_slices(weights, s, a.tmap))
        scatter_slices(weights, s, a.tmap, blocks)
    return VisionTransformer(model.config, weights)


def build_staged(stages, image_size=32, patch_size=4, channels=3, num_classes=4,
                 fmt="tt", ranks=2, scale=1.0, strategy="all", seed=0):
    """Random staged backbone plus independently initialized per-stage factors."""
    config = ViTConfig(image_size, patch_size, channels, num_classes,
                       [s if isinstance(s, StageSpec) else StageSpec(*s) for s in stages], "mean")
    model = VisionTransformer.random(config, seed)
    return model, make_partition(config, fmt, ranks, scale, strategy, seed)
