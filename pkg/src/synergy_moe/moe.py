"""Sparse mixture-of-experts layer with top-k routing and a load-balancing loss.

Full-scale geometry is d_model=3584, d_hidden=18944, 4 experts, top-2,
28 layers with MoE every fourth layer. The toy defaults keep the
three-matrix gated FFN and the expert/top-k counts, but shrink widths
to d_model=16, d_hidden=64.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import (
    Tensor,
    concat,
    div,
    index,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    scatter_rows,
    silu,
    softmax,
    top_k_rows,
    tsum,
)

__all__ = [
    "ExpertFFN",
    "Router",
    "MoELayer",
    "RoutingRecord",
    "LayerSchedule",
    "init_expert",
    "expert_forward",
    "route",
    "route_logits",
    "moe_forward",
    "load_balance_loss",
    "merge_records",
    "upcycle_from_dense",
    "build_schedule",
    "parse_mode",
    "min_topk_gap",
    "expert_shares",
]

D_MODEL = 16
D_HIDDEN = 64


@dataclass
class ExpertFFN:
    w_gate: Tensor  # d_model x d_hidden
    w_up: Tensor  # d_model x d_hidden
    w_down: Tensor  # d_hidden x d_model

    def __post_init__(self):
        dm, dh = self.w_gate.shape
        if self.w_up.shape != (dm, dh) or self.w_down.shape != (dh, dm):
            raise DimensionError(
                f"expert weights inconsistent: gate {self.w_gate.shape}, up {self.w_up.shape}, down {self.w_down.shape}"
            )

    @property
    def d_model(self) -> int:
        return self.w_gate.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.w_gate.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w_gate, self.w_up, self.w_down]


def init_expert(rng: np.random.Generator, d_model: int = D_MODEL, d_hidden: int = D_HIDDEN) -> ExpertFFN:
    def w(fan_in, fan_out):
        return Tensor(rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out)), requires_grad=True)

    return ExpertFFN(w(d_model, d_hidden), w(d_model, d_hidden), w(d_hidden, d_model))


@dataclass
class Router:
    w_router: Tensor  # d_model x M, no bias


@dataclass
class MoELayer:
    router: Router
    experts: list[ExpertFFN]
    top_k: int = 2
    renormalize: bool = True
    # count of (token, expert) evaluations; instrumentation for the sparsity contract
    evaluations: int = field(default=0, compare=False)

    def __post_init__(self):
        m = len(self.experts)
        if m < 1:
            raise ParameterError("an MoE layer needs at least one expert")
        if not 1 <= self.top_k <= m:
            raise ParameterError(f"top_k={self.top_k} outside [1, {m}]")
        dims = {(e.d_model, e.d_hidden) for e in self.experts}
        if len(dims) != 1:
            raise DimensionError(f"experts disagree on dimensions: {sorted(dims)}")
        if self.router.w_router.shape != (self.experts[0].d_model, m):
            raise DimensionError(
                f"router shape {self.router.w_router.shape} does not match d_model={self.experts[0].d_model}, M={m}"
            )

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[Tensor]:
        return [self.router.w_router] + [p for e in self.experts for p in e.parameters()]


@dataclass
class RoutingRecord:
    probs: Tensor  # tokens x M, full softmax
    selected: np.ndarray  # tokens x k expert ids
    weights: Tensor  # tokens x k mixing weights

    @property
    def num_tokens(self) -> int:
        return self.probs.shape[0]


def expert_forward(x: Tensor, e: ExpertFFN) -> Tensor:
    if x.shape[-1] != e.d_model:
        raise DimensionError(f"expert expects width {e.d_model}, input has shape {x.shape}")
    return matmul(mul(silu(matmul(x, e.w_gate)), matmul(x, e.w_up)), e.w_down)


def route(x: Tensor, layer: MoELayer) -> RoutingRecord:
    return route_logits(matmul(x, layer.router.w_router), layer.top_k, layer.renormalize)


def route_logits(logits: Tensor, top_k: int, renormalize: bool = True) -> RoutingRecord:
    """Softmax over experts, top-k selection, optional renormalization of kept weights."""
    if logits.shape[0] == 0:
        raise ParameterError("cannot route an empty token set")
    probs = softmax(logits, axis=1)
    # selection indices are constants; gradients reach the router through the kept probabilities
    selected = top_k_rows(probs.data, top_k)
    rows = np.repeat(np.arange(probs.shape[0]), top_k).reshape(-1, top_k)
    picked = index(probs, (rows, selected))
    if renormalize:
        picked = div(picked, tsum(picked, axis=1, keepdims=True))
    return RoutingRecord(probs, selected, picked)


def moe_forward(x: Tensor, layer: MoELayer) -> tuple[Tensor, RoutingRecord]:
    """Route every token and mix the outputs of its selected experts only."""
    if x.data.ndim != 2:
        raise DimensionError(f"moe_forward expects tokens x d_model, got {x.shape}")
    record = route(x, layer)
    n = x.shape[0]
    parts = []
    for e_id, expert in enumerate(layer.experts):
        tok, slot = np.nonzero(record.selected == e_id)
        if tok.size == 0:
            continue
        layer.evaluations += tok.size
        out = expert_forward(index(x, tok), expert)
        w = index(record.weights, (tok, slot))
        parts.append(scatter_rows(mul(out, _column(w)), tok, n))
    y = parts[0]
    for p in parts[1:]:
        y = y + p
    return y, record


def _column(v: Tensor) -> Tensor:
    return reshape(v, (v.shape[0], 1))


def load_balance_loss(record: RoutingRecord, num_experts: int) -> Tensor:
    """``M * sum_i F_i * G_i``.

    F_i is the fraction of tokens whose argmax expert is i (ties to the lower
    index) and is held constant; G_i is the mean routing probability and
    carries the gradient.
    """
    n = record.num_tokens
    if n == 0:
        raise ParameterError("load_balance_loss needs at least one token")
    if record.probs.shape[1] != num_experts:
        raise DimensionError(f"routing probs have {record.probs.shape[1]} experts, expected {num_experts}")
    frac = np.bincount(np.argmax(record.probs.data, axis=1), minlength=num_experts) / n
    g = mean(record.probs, axis=0)
    return scale(tsum(mul(g, Tensor(frac))), float(num_experts))


def merge_records(records: Sequence[RoutingRecord]) -> RoutingRecord:
    """Concatenate per-sample records of one layer into a batch record."""
    if len(records) == 1:
        return records[0]
    return RoutingRecord(
        concat([r.probs for r in records], axis=0),
        np.concatenate([r.selected for r in records], axis=0),
        concat([r.weights for r in records], axis=0),
    )


def expert_shares(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(argmax token fraction, mean probability) per expert."""
    probs = np.asarray(probs)
    m = probs.shape[1]
    frac = np.bincount(np.argmax(probs, axis=1), minlength=m) / probs.shape[0]
    return frac, probs.mean(axis=0)


def min_topk_gap(probs: np.ndarray, k: int) -> float:
    """Smallest gap between the k-th and (k+1)-th probability over tokens (inf when k == M)."""
    probs = np.asarray(probs)
    if k >= probs.shape[1]:
        return float("inf")
    s = -np.sort(-probs, axis=1)
    return float((s[:, k - 1] - s[:, k]).min())


def upcycle_from_dense(
    dense: ExpertFFN,
    num_experts: int,
    noise_scale: float = 0.0,
    seed: int = 0,
    top_k: int = 2,
    renormalize: bool = True,
) -> MoELayer:
    """Copy one dense FFN into ``num_experts`` experts plus seeded Gaussian noise; zero router."""
    if num_experts < 1:
        raise ParameterError("num_experts must be >= 1")
    if noise_scale < 0:
        raise ParameterError("noise_scale must be >= 0")
    rng = np.random.default_rng(seed)
    experts = []
    for _ in range(num_experts):
        ws = []
        for p in dense.parameters():
            w = p.data.copy()
            if noise_scale > 0:
                w = w + rng.normal(0.0, noise_scale, size=w.shape)
            ws.append(Tensor(w, requires_grad=True))
        experts.append(ExpertFFN(*ws))
    router = Router(Tensor(np.zeros((dense.d_model, num_experts)), requires_grad=True))
    return MoELayer(router, experts, top_k=min(top_k, num_experts), renormalize=renormalize)


# ---------------------------------------------------------------- placement


@dataclass(frozen=True)
class LayerSchedule:
    total_layers: int
    moe_layer_indices: tuple[int, ...]
    mode: str

    def __contains__(self, layer: int) -> bool:
        return layer in self.moe_layer_indices

    @property
    def num_moe_layers(self) -> int:
        return len(self.moe_layer_indices)


_INTERVAL = re.compile(r"^interval\((\d+)\)$")


def parse_mode(mode: str) -> tuple[str, int | None]:
    mode = mode.strip().lower().replace("-", "_")
    if mode == "second_half":
        mode = "last_half"
    if mode in ("first_half", "last_half", "full"):
        return mode, None
    m = _INTERVAL.match(mode)
    if m and int(m.group(1)) >= 1:
        return "interval", int(m.group(1))
    raise ParameterError(f"unknown placement mode {mode!r}; use first_half, last_half, interval(n) or full")


def build_schedule(total_layers: int, mode: str) -> LayerSchedule:
    """MoE block indices for a placement mode.

    ``interval(n)`` yields {0, n, 2n, ...} below ``total_layers``, so a
    28-layer stack with n=4 gets 7 MoE blocks (0..24). The halves take
    ceil(L/2) blocks each.
    """
    if total_layers < 1:
        raise ParameterError("total_layers must be >= 1")
    kind, n = parse_mode(mode)
    half = -(-total_layers // 2)
    if kind == "first_half":
        idx = range(half)
    elif kind == "last_half":
        idx = range(total_layers - half, total_layers)
    elif kind == "full":
        idx = range(total_layers)
    else:
        idx = range(0, total_layers, n)
    label = f"interval({n})" if kind == "interval" else kind
    return LayerSchedule(total_layers, tuple(idx), label)
