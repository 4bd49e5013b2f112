"""U-Net as a tree of named, individually replaceable operators.

Every building block of the denoiser (conv, norm, activation, attention,
transformer block, ResBlock, resampling) is an :class:`OperatorNode` with a
hierarchical id such as ``down.1.res.0.conv1``. Composite nodes own their
children; a child's id is always prefixed by its parent's id.

A node can carry a ``replacement`` (installed by :mod:`ldprune.modify`).
While one is present the node's own computation is bypassed: the graph
object itself is never rewired, which is what makes restoration exact.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

KINDS = (
    "Conv",
    "GroupNorm",
    "LayerNorm",
    "Activation",
    "Attention",
    "BasicTransformerBlock",
    "ResBlock",
    "Downsample",
    "Upsample",
    "Linear",
    "Embedding",
)

# kinds that are never offered as pruning candidates
NON_PRUNABLE = frozenset({"Embedding"})


class SpecError(ValueError):
    """Invalid :class:`UNetSpec`."""


@dataclass(frozen=True)
class UNetSpec:
    latent_channels: int = 4
    latent_size: int = 16
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    layers_per_level: int = 2
    attention_levels: tuple[int, ...] = (1, 2)
    cond_dim: int = 32
    cond_tokens: int = 4
    num_conditions: int = 8
    norm_groups: int = 8
    head_dim: int = 32
    ff_mult: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(self, "attention_levels", tuple(int(a) for a in self.attention_levels))
        self.validate()

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mults)

    @property
    def num_levels(self) -> int:
        return len(self.channel_mults)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_size, self.latent_size)

    def validate(self) -> None:
        if self.num_levels < 1:
            raise SpecError("at least one resolution level is required")
        positives = {
            "latent_channels": self.latent_channels, "latent_size": self.latent_size,
            "base_width": self.base_width, "layers_per_level": self.layers_per_level,
            "cond_dim": self.cond_dim, "cond_tokens": self.cond_tokens,
            "num_conditions": self.num_conditions, "norm_groups": self.norm_groups,
            "head_dim": self.head_dim, "ff_mult": self.ff_mult,
        }
        for name, value in positives.items():
            if value < 1:
                raise SpecError(f"{name} must be positive, got {value}")
        if any(m < 1 for m in self.channel_mults):
            raise SpecError(f"channel multipliers must be positive, got {self.channel_mults}")
        bad = [a for a in self.attention_levels if not 0 <= a < self.num_levels]
        if bad:
            raise SpecError(f"attention levels {bad} outside 0..{self.num_levels - 1}")
        if self.latent_size % (2 ** (self.num_levels - 1)):
            raise SpecError(f"latent size {self.latent_size} not divisible by 2^{self.num_levels - 1}")
        for w in self.widths:
            if w % self.norm_groups:
                raise SpecError(f"width {w} not divisible by {self.norm_groups} norm groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetSpec":
        return cls(**d)


@dataclass
class ForwardContext:
    temb: Tensor | None = None
    context: Tensor | None = None
    features: dict[str, Tensor] | None = None
    shapes: dict[str, tuple] | None = None
    timings: dict[str, float] | None = None


# --------------------------------------------------------------------------
# nodes
# --------------------------------------------------------------------------

class OperatorNode:
    """One prunable building block.

    ``layout`` is ``"map"`` for NCHW activations (shape ``(C, H, W)``),
    ``"vec"`` for per-sample vectors (``(C,)``) and ``"tokens"`` for
    sequences (``(T, C)``). ``residual_branch`` marks nodes whose output is
    added onto a residual stream; removing one drops its contribution.
    """

    kind = "Operator"

    def __init__(self, node_id: str, in_shape: tuple, out_shape: tuple, layout: str = "map",
                 residual_branch: bool = False):
        self.id = node_id
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.layout = layout
        self.residual_branch = residual_branch
        self.params: dict[str, Tensor] = {}
        self.children: list[OperatorNode] = []
        self.parent: OperatorNode | None = None
        self.replacement = None
        self.est_cost = 0.0

    # --- structure ---------------------------------------------------------

    def add_child(self, child: "OperatorNode") -> "OperatorNode":
        if not child.id.startswith(self.id + "."):
            raise ValueError(f"child id {child.id!r} must be prefixed by {self.id!r}")
        child.parent = self
        self.children.append(child)
        return child

    def walk(self) -> Iterator["OperatorNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def ancestors(self) -> Iterator["OperatorNode"]:
        p = self.parent
        while p is not None:
            yield p
            p = p.parent

    @property
    def zeroed(self) -> bool:
        return self.replacement is not None and getattr(self.replacement, "zero", False)

    @property
    def in_channels(self) -> int:
        return self.in_shape[-1] if self.layout == "tokens" else self.in_shape[0]

    @property
    def out_channels(self) -> int:
        return self.out_shape[-1] if self.layout == "tokens" else self.out_shape[0]

    # --- parameters --------------------------------------------------------

    def own_param_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()], dtype=np.int64))

    def live_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Parameters actually used in the forward pass, in a fixed order."""
        if self.replacement is not None:
            for name, p in self.replacement.parameters():
                yield f"{self.id}:{name}", p
            return
        for name, p in self.params.items():
            yield f"{self.id}.{name}", p
        for c in self.children:
            yield from c.live_parameters()

    def total_param_count(self) -> int:
        return int(np.sum([p.size for p in self.all_own_params()], dtype=np.int64))

    def all_own_params(self) -> Iterator[Tensor]:
        for n in self.walk():
            yield from n.params.values()

    def macs(self) -> float:
        """Rough multiply-accumulate count of one forward at batch 1."""
        return float(sum(c.macs() for c in self.children))

    # --- execution ---------------------------------------------------------

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        start = time.perf_counter() if ctx.timings is not None else 0.0
        if self.replacement is not None:
            out = self.replacement.apply(x)
        else:
            out = self.compute(x, ctx)
        if ctx.timings is not None:
            ctx.timings[self.id] = ctx.timings.get(self.id, 0.0) + time.perf_counter() - start
        if ctx.shapes is not None:
            ctx.shapes[self.id] = (tuple(x.shape[1:]), tuple(out.shape[1:]))
        return out

    def compute(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.id!r}, {self.in_shape}->{self.out_shape})"


def _uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ConvNode(OperatorNode):
    kind = "Conv"

    def __init__(self, node_id, cin, cout, size, kernel=3, stride=1, rng=None):
        pad = kernel // 2
        out_size = (size + 2 * pad - kernel) // stride + 1
        super().__init__(node_id, (cin, size, size), (cout, out_size, out_size))
        self.stride, self.padding = stride, pad
        fan_in = cin * kernel * kernel
        self.params["weight"] = Tensor(_uniform(rng, (cout, cin, kernel, kernel), fan_in), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (cout,), fan_in), requires_grad=True)

    def compute(self, x, ctx):
        return T.conv2d(x, self.params["weight"], self.params["bias"], self.stride, self.padding)

    def macs(self):
        w = self.params["weight"].shape
        return float(np.prod(w) * self.out_shape[1] * self.out_shape[2])


class GroupNormNode(OperatorNode):
    kind = "GroupNorm"

    def __init__(self, node_id, channels, size, groups):
        super().__init__(node_id, (channels, size, size), (channels, size, size))
        self.groups = groups
        self.params["weight"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def compute(self, x, ctx):
        return T.group_norm(x, self.groups, self.params["weight"], self.params["bias"])

    def macs(self):
        return 4.0 * float(np.prod(self.in_shape))


class LayerNormNode(OperatorNode):
    kind = "LayerNorm"

    def __init__(self, node_id, tokens, channels):
        super().__init__(node_id, (tokens, channels), (tokens, channels), layout="tokens")
        self.params["weight"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.params["bias"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def compute(self, x, ctx):
        return T.layer_norm(x, self.params["weight"], self.params["bias"])

    def macs(self):
        return 4.0 * float(np.prod(self.in_shape))


class ActivationNode(OperatorNode):
    kind = "Activation"

    def __init__(self, node_id, shape, layout="map"):
        super().__init__(node_id, shape, shape, layout=layout)

    def compute(self, x, ctx):
        return T.silu(x)

    def macs(self):
        return 2.0 * float(np.prod(self.in_shape))


class LinearNode(OperatorNode):
    kind = "Linear"

    def __init__(self, node_id, fin, fout, rng, tokens=None, residual_branch=False):
        if tokens is None:
            super().__init__(node_id, (fin,), (fout,), layout="vec", residual_branch=residual_branch)
        else:
            super().__init__(node_id, (tokens, fin), (tokens, fout), layout="tokens",
                             residual_branch=residual_branch)
        self.params["weight"] = Tensor(_uniform(rng, (fout, fin), fin), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (fout,), fin), requires_grad=True)

    def compute(self, x, ctx):
        return T.linear(x, self.params["weight"], self.params["bias"])

    def macs(self):
        rows = self.in_shape[0] if self.layout == "tokens" else 1
        return float(self.params["weight"].size * rows)


class AttentionNode(OperatorNode):
    """Multi-head attention on a token stream; cross-attention reads ``ctx.context``."""

    kind = "Attention"

    def __init__(self, node_id, tokens, channels, head_dim, rng, context_dim=None, context_tokens=None):
        super().__init__(node_id, (tokens, channels), (tokens, channels), layout="tokens", residual_branch=True)
        self.cross = context_dim is not None
        kdim = context_dim if self.cross else channels
        self.kv_tokens = context_tokens if self.cross else tokens
        self.heads = max(1, channels // head_dim)
        if channels % self.heads:
            raise SpecError(f"{node_id}: {channels} channels not divisible into {self.heads} heads")
        self.params["to_q"] = Tensor(_uniform(rng, (channels, channels), channels), requires_grad=True)
        self.params["to_k"] = Tensor(_uniform(rng, (channels, kdim), kdim), requires_grad=True)
        self.params["to_v"] = Tensor(_uniform(rng, (channels, kdim), kdim), requires_grad=True)
        self.params["to_out"] = Tensor(_uniform(rng, (channels, channels), channels), requires_grad=True)
        self.params["out_bias"] = Tensor(_uniform(rng, (channels,), channels), requires_grad=True)

    def _split(self, t: Tensor) -> Tensor:
        n, L, c = t.shape
        return T.transpose(T.reshape(t, (n, L, self.heads, c // self.heads)), (0, 2, 1, 3))

    def compute(self, x, ctx):
        src = ctx.context if self.cross else x
        if src is None:
            raise ValueError(f"{self.id}: cross-attention needs a condition context")
        q = self._split(T.linear(x, self.params["to_q"]))
        k = self._split(T.linear(src, self.params["to_k"]))
        v = self._split(T.linear(src, self.params["to_v"]))
        o = T.scaled_dot_product_attention(q, k, v)
        n, _, L, d = o.shape
        o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (n, L, self.heads * d))
        return T.linear(o, self.params["to_out"], self.params["out_bias"])

    def macs(self):
        tokens, c = self.in_shape
        proj = tokens * c * c * 2 + self.kv_tokens * self.params["to_k"].size * 2
        return float(proj + 2 * tokens * self.kv_tokens * c)


class ResBlockNode(OperatorNode):
    kind = "ResBlock"

    def __init__(self, node_id, cin, cout, size, temb_dim, groups, rng):
        super().__init__(node_id, (cin, size, size), (cout, size, size))
        p = node_id
        self.norm1 = self.add_child(GroupNormNode(f"{p}.norm1", cin, size, groups if cin % groups == 0 else 1))
        self.act1 = self.add_child(ActivationNode(f"{p}.act1", (cin, size, size)))
        self.conv1 = self.add_child(ConvNode(f"{p}.conv1", cin, cout, size, rng=rng))
        self.time_proj = self.add_child(LinearNode(f"{p}.time_proj", temb_dim, cout, rng, residual_branch=True))
        self.norm2 = self.add_child(GroupNormNode(f"{p}.norm2", cout, size, groups))
        self.act2 = self.add_child(ActivationNode(f"{p}.act2", (cout, size, size)))
        self.conv2 = self.add_child(ConvNode(f"{p}.conv2", cout, cout, size, rng=rng))
        self.shortcut = None
        if cin != cout:
            self.shortcut = self.add_child(ConvNode(f"{p}.conv_shortcut", cin, cout, size, kernel=1, rng=rng))

    def compute(self, x, ctx):
        h = self.conv1(self.act1(self.norm1(x, ctx), ctx), ctx)
        if not self.time_proj.zeroed:
            tp = self.time_proj(ctx.temb, ctx)
            h = T.add(h, T.reshape(tp, (tp.shape[0], tp.shape[1], 1, 1)))
        h = self.conv2(self.act2(self.norm2(h, ctx), ctx), ctx)
        skip = self.shortcut(x, ctx) if self.shortcut is not None else x
        return T.residual_add(skip, h)


class TransformerBlockNode(OperatorNode):
    """Spatial transformer: norm, 1x1 in-projection, self-attn, cross-attn, feed-forward, out-projection."""

    kind = "BasicTransformerBlock"

    def __init__(self, node_id, channels, size, spec: UNetSpec, rng):
        super().__init__(node_id, (channels, size, size), (channels, size, size))
        p, tokens = node_id, size * size
        self.norm = self.add_child(GroupNormNode(f"{p}.norm", channels, size, spec.norm_groups))
        self.proj_in = self.add_child(ConvNode(f"{p}.proj_in", channels, channels, size, kernel=1, rng=rng))
        self.norm1 = self.add_child(LayerNormNode(f"{p}.norm1", tokens, channels))
        self.attn1 = self.add_child(AttentionNode(f"{p}.attn1", tokens, channels, spec.head_dim, rng))
        self.norm2 = self.add_child(LayerNormNode(f"{p}.norm2", tokens, channels))
        self.attn2 = self.add_child(AttentionNode(f"{p}.attn2", tokens, channels, spec.head_dim, rng,
                                                  context_dim=spec.cond_dim, context_tokens=spec.cond_tokens))
        self.norm3 = self.add_child(LayerNormNode(f"{p}.norm3", tokens, channels))
        hidden = channels * spec.ff_mult
        self.ff1 = self.add_child(LinearNode(f"{p}.ff.linear_1", channels, hidden, rng, tokens=tokens))
        self.ff_act = self.add_child(ActivationNode(f"{p}.ff.act", (tokens, hidden), layout="tokens"))
        self.ff2 = self.add_child(LinearNode(f"{p}.ff.linear_2", hidden, channels, rng, tokens=tokens))
        self.proj_out = self.add_child(ConvNode(f"{p}.proj_out", channels, channels, size, kernel=1, rng=rng))

    def compute(self, x, ctx):
        n, c, h, w = x.shape
        y = self.proj_in(self.norm(x, ctx), ctx)
        t = T.reshape(T.transpose(y, (0, 2, 3, 1)), (n, h * w, c))
        if not self.attn1.zeroed:
            t = T.residual_add(t, self.attn1(self.norm1(t, ctx), ctx))
        if not self.attn2.zeroed:
            t = T.residual_add(t, self.attn2(self.norm2(t, ctx), ctx))
        t = T.residual_add(t, self.ff2(self.ff_act(self.ff1(self.norm3(t, ctx), ctx), ctx), ctx))
        y = T.transpose(T.reshape(t, (n, h, w, c)), (0, 3, 1, 2))
        return T.residual_add(x, self.proj_out(y, ctx))


class DownsampleNode(OperatorNode):
    kind = "Downsample"

    def __init__(self, node_id, channels, size, rng):
        super().__init__(node_id, (channels, size, size), (channels, size // 2, size // 2))
        fan_in = channels * 9
        self.params["weight"] = Tensor(_uniform(rng, (channels, channels, 3, 3), fan_in), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (channels,), fan_in), requires_grad=True)

    def compute(self, x, ctx):
        return T.conv2d(x, self.params["weight"], self.params["bias"], stride=2, padding=1)

    def macs(self):
        return float(self.params["weight"].size * self.out_shape[1] * self.out_shape[2])


class UpsampleNode(OperatorNode):
    kind = "Upsample"

    def __init__(self, node_id, channels, size, rng):
        super().__init__(node_id, (channels, size, size), (channels, size * 2, size * 2))
        fan_in = channels * 9
        self.params["weight"] = Tensor(_uniform(rng, (channels, channels, 3, 3), fan_in), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, (channels,), fan_in), requires_grad=True)

    def compute(self, x, ctx):
        return T.conv2d(T.upsample_nearest(x, 2), self.params["weight"], self.params["bias"], padding=1)

    def macs(self):
        return float(self.params["weight"].size * self.out_shape[1] * self.out_shape[2])


class EmbeddingNode(OperatorNode):
    """Learned table of condition token sequences (stand-in for a text encoder)."""

    kind = "Embedding"

    def __init__(self, node_id, num, tokens, dim, rng):
        super().__init__(node_id, (1,), (tokens, dim), layout="tokens")
        self.params["table"] = Tensor(rng.standard_normal((num, tokens, dim)).astype(np.float32),
                                      requires_grad=True)

    def lookup(self, ids) -> Tensor:
        return T.embedding(self.params["table"], ids)

    def macs(self):
        return 0.0


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

def timestep_embedding(timesteps: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(timesteps, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb.astype(dtype)


class OperatorGraph:
    """The whole denoiser: top-level operator sequence plus U-Net skip links."""

    def __init__(self, spec: UNetSpec):
        self.spec = spec
        self.top: list[OperatorNode] = []
        self.levels_down: list[dict] = []
        self.mid: list[OperatorNode] = []
        self.levels_up: list[dict] = []
        self.skip_links: list[tuple[str, str]] = []
        self.forward_calls = 0
        self.active_plan = None
        self.applied_plans: list = []
        self._index: dict[str, OperatorNode] = {}

    # --- structure ---------------------------------------------------------

    def _register(self, node: OperatorNode) -> OperatorNode:
        self.top.append(node)
        for n in node.walk():
            if n.id in self._index:
                raise ValueError(f"duplicate operator id {n.id!r}")
            self._index[n.id] = n
        return node

    def node(self, node_id: str) -> OperatorNode:
        try:
            return self._index[node_id]
        except KeyError:
            raise KeyError(f"unknown operator id {node_id!r}") from None

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    @property
    def nodes(self) -> list[OperatorNode]:
        """All nodes, parents before children, in execution order."""
        return [n for top in self.top for n in top.walk()]

    @property
    def edges(self) -> list[tuple[str, str]]:
        chain = [n.id for n in self.top if n.kind not in ("Embedding",)]
        chain = [i for i in chain if not i.startswith("time_embed")]
        return list(zip(chain, chain[1:])) + list(self.skip_links)

    def is_live(self, node: OperatorNode) -> bool:
        """False for nodes inside a permanently replaced ancestor."""
        return not any(a.replacement is not None for a in node.ancestors())

    def live_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for n in self.top:
            out.extend(n.live_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.live_parameters()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def total_cost(self) -> float:
        return float(sum(n.est_cost for n in self.top))

    # --- execution ---------------------------------------------------------

    def forward(self, latent: Tensor, timestep, condition_id, features: dict | None = None,
                shapes: dict | None = None, timings: dict | None = None) -> Tensor:
        """Predict noise for ``latent`` (NCHW) at ``timestep`` under ``condition_id``.

        ``timestep`` and ``condition_id`` may be scalars or per-sample arrays.
        Passing ``features`` collects activations at every level boundary.
        """
        spec = self.spec
        if latent.ndim != 4 or tuple(latent.shape[1:]) != spec.latent_shape:
            raise ShapeError(f"latent shape {latent.shape[1:]} != expected {spec.latent_shape}")
        n = latent.shape[0]
        ts = np.broadcast_to(np.asarray(timestep), (n,))
        cond = np.broadcast_to(np.asarray(condition_id, dtype=np.int64), (n,))
        if cond.min() < 0 or cond.max() >= spec.num_conditions:
            raise ValueError(f"condition id out of range 0..{spec.num_conditions - 1}")
        self.forward_calls += n
        ctx = ForwardContext(features=features, shapes=shapes, timings=timings)

        temb = Tensor(timestep_embedding(ts, spec.base_width), dtype=latent.data.dtype)
        for node in self.time_embed:
            temb = node(temb, ctx)
        ctx.temb = T.silu(temb)
        ctx.context = self.cond_embed.lookup(cond)

        h = self.conv_in(latent, ctx)
        skips = []
        for li, level in enumerate(self.levels_down):
            for res, attn in level["layers"]:
                h = res(h, ctx)
                if attn is not None:
                    h = attn(h, ctx)
                skips.append(h)
            if level["downsample"] is not None:
                h = level["downsample"](h, ctx)
            if features is not None:
                features[f"down.{li}"] = h
        for node in self.mid:
            h = node(h, ctx)
        if features is not None:
            features["mid"] = h
        for ui, level in enumerate(self.levels_up):
            for res, attn in level["layers"]:
                h = res(T.concat([h, skips.pop()], axis=1), ctx)
                if attn is not None:
                    h = attn(h, ctx)
            if level["upsample"] is not None:
                h = level["upsample"](h, ctx)
            if features is not None:
                features[f"up.{ui}"] = h
        for node in self.tail:
            h = node(h, ctx)
        return h

    __call__ = forward

    def trace_shapes(self, batch: int = 1) -> dict[str, tuple]:
        """Observed ``(in, out)`` per-sample shapes of every executed node."""
        shapes: dict[str, tuple] = {}
        x = Tensor(np.zeros((batch,) + self.spec.latent_shape, np.float32))
        calls = self.forward_calls
        self.forward(x, 0, 0, shapes=shapes)
        self.forward_calls = calls
        return shapes

    def check_shapes(self) -> None:
        """Run shape inference by execution and compare with declared shapes."""
        for node_id, (i, o) in self.trace_shapes().items():
            node = self._index[node_id]
            if (i, o) != (node.in_shape, node.out_shape):
                raise ShapeError(f"{node_id}: declared {node.in_shape}->{node.out_shape}, observed {i}->{o}")


def build_unet(spec: UNetSpec, seed: int = 0) -> OperatorGraph:
    """Construct the toy conditional U-Net with deterministic weights."""
    spec.validate()
    rng = np.random.default_rng(seed)
    g = OperatorGraph(spec)
    base, temb_dim = spec.base_width, spec.base_width * 4
    widths = spec.widths

    g.time_embed = [
        g._register(LinearNode("time_embed.linear_1", base, temb_dim, rng)),
        g._register(ActivationNode("time_embed.act", (temb_dim,), layout="vec")),
        g._register(LinearNode("time_embed.linear_2", temb_dim, temb_dim, rng)),
    ]
    g.cond_embed = g._register(EmbeddingNode("cond_embed", spec.num_conditions, spec.cond_tokens, spec.cond_dim, rng))
    g.conv_in = g._register(ConvNode("conv_in", spec.latent_channels, base, spec.latent_size, rng=rng))

    size, ch = spec.latent_size, base
    skip_stack: list[tuple[str, int]] = []
    for li, width in enumerate(widths):
        layers = []
        for j in range(spec.layers_per_level):
            res = g._register(ResBlockNode(f"down.{li}.res.{j}", ch, width, size, temb_dim, spec.norm_groups, rng))
            ch = width
            attn = None
            if li in spec.attention_levels:
                attn = g._register(TransformerBlockNode(f"down.{li}.attn.{j}", ch, size, spec, rng))
            layers.append((res, attn))
            skip_stack.append(((attn or res).id, ch))
        down = None
        if li < spec.num_levels - 1:
            down = g._register(DownsampleNode(f"down.{li}.downsample", ch, size, rng))
            size //= 2
        g.levels_down.append({"layers": layers, "downsample": down})

    g.mid = [g._register(ResBlockNode("mid.res.0", ch, ch, size, temb_dim, spec.norm_groups, rng))]
    if spec.attention_levels:
        g.mid.append(g._register(TransformerBlockNode("mid.attn.0", ch, size, spec, rng)))
    g.mid.append(g._register(ResBlockNode("mid.res.1", ch, ch, size, temb_dim, spec.norm_groups, rng)))

    for ui in range(spec.num_levels):
        li = spec.num_levels - 1 - ui
        width = widths[li]
        layers = []
        for j in range(spec.layers_per_level):
            skip_id, skip_ch = skip_stack.pop()
            res = g._register(ResBlockNode(f"up.{ui}.res.{j}", ch + skip_ch, width, size, temb_dim,
                                           spec.norm_groups, rng))
            g.skip_links.append((skip_id, res.id))
            ch = width
            attn = None
            if li in spec.attention_levels:
                attn = g._register(TransformerBlockNode(f"up.{ui}.attn.{j}", ch, size, spec, rng))
            layers.append((res, attn))
        up = None
        if li > 0:
            up = g._register(UpsampleNode(f"up.{ui}.upsample", ch, size, rng))
            size *= 2
        g.levels_up.append({"layers": layers, "upsample": up})

    g.tail = [
        g._register(GroupNormNode("norm_out", ch, size, spec.norm_groups)),
        g._register(ActivationNode("act_out", (ch, size, size))),
        g._register(ConvNode("conv_out", ch, spec.latent_channels, size, rng=rng)),
    ]
    estimate_costs(g, method="macs")
    return g


# --------------------------------------------------------------------------
# cost estimation and candidate enumeration
# --------------------------------------------------------------------------

def estimate_costs(graph: OperatorGraph, method: str = "time", repeats: int = 5, batch: int = 1) -> None:
    """Fill ``est_cost`` on every node.

    ``"time"`` measures per-node wall time over ``repeats`` calibration
    forwards and keeps the median; ``"macs"`` uses the analytic
    multiply-accumulate count, which is reproducible across runs.
    """
    if method == "macs":
        for n in graph.nodes:
            n.est_cost = n.macs() if not n.children else 0.0
        for top in graph.top:
            _rollup(top)
        return
    if method != "time":
        raise ValueError(f"unknown cost method {method!r}")
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((batch,) + graph.spec.latent_shape).astype(np.float32))
    calls = graph.forward_calls
    graph.forward(x, 500, 0)
    samples: dict[str, list[float]] = {}
    for _ in range(repeats):
        timings: dict[str, float] = {}
        graph.forward(x, 500, 0, timings=timings)
        for k, v in timings.items():
            samples.setdefault(k, []).append(v)
    graph.forward_calls = calls
    for n in graph.nodes:
        n.est_cost = float(np.median(samples[n.id])) if n.id in samples else 0.0


def _rollup(node: OperatorNode) -> float:
    if node.children:
        node.est_cost = float(sum(_rollup(c) for c in node.children))
    return node.est_cost


def enumerate_candidates(graph: OperatorGraph, min_cost_fraction: float = 0.0) -> list[str]:
    """Ids of every prunable operator whose cost share is at least ``min_cost_fraction``.

    An operator is prunable when it can be removed outright or replaced by
    an adapter strictly cheaper than itself; already-modified operators and
    anything nested inside one are skipped.
    """
    from .modify import is_prunable

    if not 0.0 <= min_cost_fraction < 1.0:
        raise ValueError(f"min_cost_fraction must lie in [0, 1), got {min_cost_fraction}")
    total = graph.total_cost()
    out = []
    for n in graph.nodes:
        if n.kind in NON_PRUNABLE or n.replacement is not None or not graph.is_live(n):
            continue
        if total > 0 and n.est_cost / total < min_cost_fraction:
            continue
        if is_prunable(graph, n.id):
            out.append(n.id)
    return out


def clone_graph(graph: OperatorGraph) -> OperatorGraph:
    import copy

    return copy.deepcopy(graph)

