"""Reversible single-operator edits: removal or replacement by a cheap adapter.

An operator whose input and output shapes agree is removed outright (it
becomes the identity). Operators sitting on an additive residual branch
(attention, timestep projection) are removed by dropping the branch's
contribution. Everything else is replaced by the smallest adapter that
maps its input shape to its output shape: a 1x1 channel map when channel
counts differ, average pooling when resolution shrinks, nearest upsampling
when it grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import NON_PRUNABLE, OperatorGraph, OperatorNode
from .tensor import Tensor

ADAPTER_INITS = ("uniform", "random")


class ModificationError(RuntimeError):
    """Raised for invalid plan/apply/restore sequences or unsupported shapes."""


@dataclass(frozen=True)
class AdapterSpec:
    channel_map: tuple[int, int] | None = None
    spatial_map: tuple[str, int] | None = None
    init: str = "uniform"

    def param_count(self) -> int:
        if self.channel_map is None:
            return 0
        cin, cout = self.channel_map
        return cin * cout + cout

    def to_dict(self) -> dict:
        return {
            "channel_map": list(self.channel_map) if self.channel_map else None,
            "spatial_map": list(self.spatial_map) if self.spatial_map else None,
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        cm, sm = d.get("channel_map"), d.get("spatial_map")
        return cls(tuple(cm) if cm else None, (sm[0], int(sm[1])) if sm else None, d.get("init", "uniform"))


@dataclass
class ModificationPlan:
    target: str
    action: str  # "remove" | "replace"
    adapter: AdapterSpec | None = None
    zero_branch: bool = False
    saved_state: OperatorNode | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "action": self.action,
            "adapter": self.adapter.to_dict() if self.adapter else None,
            "zero_branch": self.zero_branch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModificationPlan":
        adapter = AdapterSpec.from_dict(d["adapter"]) if d.get("adapter") else None
        return cls(d["target"], d["action"], adapter, bool(d.get("zero_branch", False)))


# --------------------------------------------------------------------------
# replacements installed on nodes
# --------------------------------------------------------------------------

class Identity:
    zero = False

    def apply(self, x: Tensor) -> Tensor:
        return x

    def parameters(self):
        return []


class ZeroBranch:
    """Marks an additive branch as removed; parents skip the addition."""

    zero = True

    def __init__(self, out_shape: tuple):
        self.out_shape = out_shape

    def apply(self, x: Tensor) -> Tensor:
        return Tensor(np.zeros((x.shape[0],) + self.out_shape), dtype=x.data.dtype)

    def parameters(self):
        return []


class Adapter:
    """Shape adapter: optional channel map plus optional resampling."""

    zero = False

    def __init__(self, spec: AdapterSpec, layout: str, seed: int = 0):
        self.spec = spec
        self.layout = layout
        self.weight = self.bias = None
        if spec.channel_map is not None:
            cin, cout = spec.channel_map
            if spec.init == "uniform":
                w = np.full((cout, cin), 1.0 / cin, dtype=np.float32)
            elif spec.init == "random":
                w = np.random.default_rng(seed).uniform(-1, 1, (cout, cin)).astype(np.float32) / np.sqrt(cin)
            else:
                raise ModificationError(f"unknown adapter init {spec.init!r}")
            if layout == "map":
                w = w.reshape(cout, cin, 1, 1)
            self.weight = Tensor(w, requires_grad=True)
            self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def _channels(self, x: Tensor) -> Tensor:
        if self.weight is None:
            return x
        if self.layout == "map":
            return T.conv2d(x, self.weight, self.bias)
        return T.linear(x, self.weight, self.bias)

    def apply(self, x: Tensor) -> Tensor:
        sm = self.spec.spatial_map
        if sm is None:
            return self._channels(x)
        mode, factor = sm
        if mode == "avg_pool":
            return self._channels(T.avg_pool2d(x, factor))
        return T.upsample_nearest(self._channels(x), factor)

    def parameters(self):
        if self.weight is None:
            return []
        return [("adapter.weight", self.weight), ("adapter.bias", self.bias)]

    def macs(self, node: OperatorNode) -> float:
        if self.spec.channel_map is None:
            return 0.0
        cin, cout = self.spec.channel_map
        spatial = node.out_shape[1:] if node.layout == "map" else node.out_shape[:-1]
        if self.spec.spatial_map and self.spec.spatial_map[0] == "upsample_nearest":
            spatial = node.in_shape[1:]
        return float(cin * cout * np.prod(spatial, dtype=np.int64))


# --------------------------------------------------------------------------
# planning
# --------------------------------------------------------------------------

def _spatial(node: OperatorNode, shape: tuple) -> tuple:
    if node.layout == "map":
        return shape[1:]
    if node.layout == "tokens":
        return shape[:-1]
    return ()


def plan_modification(graph: OperatorGraph, op_id: str, adapter_init: str = "uniform") -> ModificationPlan:
    node = graph.node(op_id)
    if node.kind in NON_PRUNABLE:
        raise ModificationError(f"{op_id}: {node.kind} operators are not prunable")
    if node.residual_branch:
        return ModificationPlan(op_id, "remove", zero_branch=True)
    if node.in_shape == node.out_shape:
        return ModificationPlan(op_id, "remove")

    channel_map = None
    if node.in_channels != node.out_channels:
        channel_map = (node.in_channels, node.out_channels)
    sin, sout = _spatial(node, node.in_shape), _spatial(node, node.out_shape)
    spatial_map = None
    if sin != sout:
        if node.layout != "map":
            raise ModificationError(f"{op_id}: cannot resample a {node.layout} operator")
        (hi, wi), (ho, wo) = sin, sout
        if hi >= ho and wi >= wo and hi % ho == 0 and wi % wo == 0 and hi // ho == wi // wo:
            spatial_map = ("avg_pool", hi // ho)
        elif ho >= hi and wo >= wi and ho % hi == 0 and wo % wi == 0 and ho // hi == wo // wi:
            spatial_map = ("upsample_nearest", ho // hi)
        else:
            raise ModificationError(f"{op_id}: spatial ratio {sin}->{sout} is not an integer factor")
    return ModificationPlan(op_id, "replace", AdapterSpec(channel_map, spatial_map, adapter_init))


def is_prunable(graph: OperatorGraph, op_id: str) -> bool:
    """True when the operator's modification is strictly cheaper than the operator."""
    node = graph.node(op_id)
    try:
        plan = plan_modification(graph, op_id)
    except ModificationError:
        return False
    if plan.action == "remove":
        return True
    adapter = Adapter(plan.adapter, node.layout)
    return (plan.adapter.param_count() < node.total_param_count()
            and adapter.macs(node) < node.macs())


def build_replacement(graph: OperatorGraph, plan: ModificationPlan):
    node = graph.node(plan.target)
    if plan.zero_branch:
        return ZeroBranch(node.out_shape)
    if plan.action == "remove":
        return Identity()
    return Adapter(plan.adapter, node.layout)


# --------------------------------------------------------------------------
# apply / restore / commit
# --------------------------------------------------------------------------

def apply(graph: OperatorGraph, plan: ModificationPlan) -> None:
    """Install ``plan`` temporarily; exactly one temporary plan may be active."""
    if graph.active_plan is not None:
        raise ModificationError(f"plan for {graph.active_plan.target!r} is already active")
    node = graph.node(plan.target)
    if node.replacement is not None or not graph.is_live(node):
        raise ModificationError(f"{plan.target}: operator is already modified")
    plan.saved_state = node
    node.replacement = build_replacement(graph, plan)
    graph.active_plan = plan


def restore(graph: OperatorGraph, plan: ModificationPlan) -> None:
    if graph.active_plan is not plan:
        raise ModificationError(f"{plan.target}: restore called for a plan that is not active")
    graph.node(plan.target).replacement = None
    graph.active_plan = None


def commit(graph: OperatorGraph, plan: ModificationPlan, replacement=None) -> None:
    """Apply ``plan`` permanently (pruning). The operator's own weights stop being live."""
    if graph.active_plan is not None:
        raise ModificationError("cannot commit while a temporary plan is active")
    node = graph.node(plan.target)
    if node.replacement is not None or not graph.is_live(node):
        raise ModificationError(f"{plan.target}: operator is already modified")
    plan.saved_state = node
    node.replacement = replacement if replacement is not None else build_replacement(graph, plan)
    graph.applied_plans.append(plan)
