"""Toy multimodal transformer whose FFN blocks can be upcycled into MoE layers.

Per block: ``X' = MSA(LN(X)) + X`` then ``X = FFN(LN(X')) + X'`` where FFN is
either a dense gated FFN or a sparse MoE layer. The input sequence is the
projected visual tokens followed by the text embeddings, optionally with
synergy tokens appended, and the output is ``LN(X_L)`` fed to a linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .moe import (
    ExpertFFN,
    LayerSchedule,
    MoELayer,
    RoutingRecord,
    build_schedule,
    expert_forward,
    init_expert,
    moe_forward,
    upcycle_from_dense,
)
from .synergy import (
    AlignmentProjector,
    SynergySlice,
    extract_synergy,
    init_projector,
    insert_synergy_tokens,
)
from .tensor import Tensor, add, concat, cross_entropy, index, layer_norm, matmul, scale, softmax, transpose

__all__ = [
    "ModelConfig",
    "Block",
    "ToyModel",
    "ForwardOutput",
    "init_model",
    "forward",
    "text_cross_entropy",
    "upcycle_model",
    "PARAM_GROUPS",
]

PARAM_GROUPS = ("projector", "attention", "layernorm", "embedding", "head", "ffn_experts", "router", "alignment")

_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_vis: int = 48
    d_model: int = 16
    d_hidden: int = 64
    n_heads: int = 2
    vocab: int = 64
    total_layers: int = 8
    schedule: str = "interval(4)"
    num_experts: int = 4
    top_k: int = 2
    synergy_tokens: int = 4
    temporal_dim: int = 12
    spatial_dim: int = 10
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ParameterError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("d_vis", "d_model", "d_hidden", "n_heads", "vocab", "total_layers", "num_experts"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not 1 <= self.top_k <= self.num_experts:
            raise ParameterError(f"top_k={self.top_k} outside [1, num_experts={self.num_experts}]")
        if self.synergy_tokens < 1:
            raise ParameterError("synergy_tokens must be >= 1")
        build_schedule(self.total_layers, self.schedule)


@dataclass
class Block:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: ExpertFFN | None = None
    moe: MoELayer | None = None


@dataclass
class ToyModel:
    cfg: ModelConfig
    schedule: LayerSchedule
    proj_w: Tensor  # d_vis x d_model
    proj_b: Tensor
    token_embedding: Tensor  # vocab x d_model
    blocks: list[Block]
    lnf_g: Tensor
    lnf_b: Tensor
    head: Tensor  # d_model x vocab
    synergy_embedding: Tensor  # synergy_tokens x d_model
    alignment: AlignmentProjector

    @property
    def is_upcycled(self) -> bool:
        return any(b.moe is not None for b in self.blocks)

    def moe_layers(self) -> list[tuple[int, MoELayer]]:
        return [(i, b.moe) for i, b in enumerate(self.blocks) if b.moe is not None]

    def named_parameters(self) -> Iterator[tuple[str, str, Tensor]]:
        """Yield ``(name, group, tensor)`` for every parameter exactly once."""
        yield "proj.w", "projector", self.proj_w
        yield "proj.b", "projector", self.proj_b
        yield "embed", "embedding", self.token_embedding
        for i, b in enumerate(self.blocks):
            for n in ("wq", "wk", "wv", "wo"):
                yield f"blocks.{i}.{n}", "attention", getattr(b, n)
            for n in ("ln1_g", "ln1_b", "ln2_g", "ln2_b"):
                yield f"blocks.{i}.{n}", "layernorm", getattr(b, n)
            if b.moe is not None:
                yield f"blocks.{i}.router", "router", b.moe.router.w_router
                for e, ex in enumerate(b.moe.experts):
                    for n in ("w_gate", "w_up", "w_down"):
                        yield f"blocks.{i}.experts.{e}.{n}", "ffn_experts", getattr(ex, n)
            else:
                for n in ("w_gate", "w_up", "w_down"):
                    yield f"blocks.{i}.ffn.{n}", "ffn_experts", getattr(b.ffn, n)
        yield "lnf_g", "layernorm", self.lnf_g
        yield "lnf_b", "layernorm", self.lnf_b
        yield "head", "head", self.head
        yield "synergy_embedding", "alignment", self.synergy_embedding
        for name, mlp in (("temporal", self.alignment.temporal), ("spatial", self.alignment.spatial)):
            yield f"align.{name}.w1", "alignment", mlp.w1
            yield f"align.{name}.w2", "alignment", mlp.w2

    def parameters(self, groups: Sequence[str] | None = None) -> list[Tensor]:
        return [t for _, g, t in self.named_parameters() if groups is None or g in groups]

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, _, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, _, t in self.named_parameters():
            if n not in state:
                raise ParameterError(f"checkpoint lacks parameter {n}")
            if state[n].shape != t.shape:
                raise DimensionError(f"checkpoint shape {state[n].shape} for {n}, model has {t.shape}")
            t.data[...] = state[n]


def init_model(cfg: ModelConfig, seed: int) -> ToyModel:
    rng = np.random.default_rng(seed)
    d = cfg.d_model

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def const(shape, v):
        return Tensor(np.full(shape, v), requires_grad=True)

    blocks = []
    for _ in range(cfg.total_layers):
        blocks.append(
            Block(
                wq=normal((d, d), d**-0.5),
                wk=normal((d, d), d**-0.5),
                wv=normal((d, d), d**-0.5),
                wo=normal((d, d), d**-0.5 / math.sqrt(2 * cfg.total_layers)),
                ln1_g=const(d, 1.0),
                ln1_b=const(d, 0.0),
                ln2_g=const(d, 1.0),
                ln2_b=const(d, 0.0),
                ffn=init_expert(rng, d, cfg.d_hidden),
            )
        )
        # residual-branch outputs start small so the stack is near identity
        blocks[-1].ffn.w_down.data *= 1.0 / math.sqrt(2 * cfg.total_layers)
    return ToyModel(
        cfg=cfg,
        schedule=build_schedule(cfg.total_layers, cfg.schedule),
        proj_w=normal((cfg.d_vis, d), cfg.d_vis**-0.5),
        proj_b=const(d, 0.0),
        token_embedding=normal((cfg.vocab, d), 1.0),
        blocks=blocks,
        lnf_g=const(d, 1.0),
        lnf_b=const(d, 0.0),
        head=normal((d, cfg.vocab), 0.02),
        synergy_embedding=normal((cfg.synergy_tokens, d), 1.0),
        alignment=init_projector(rng, d, cfg.temporal_dim, cfg.spatial_dim),
    )


def upcycle_model(model: ToyModel, noise_scale: float, seed: int) -> None:
    """Replace the dense FFN of every scheduled block with an MoE layer initialised from it."""
    if model.is_upcycled:
        raise ParameterError("model already carries MoE layers")
    for layer in model.schedule.moe_layer_indices:
        b = model.blocks[layer]
        b.moe = upcycle_from_dense(b.ffn, model.cfg.num_experts, noise_scale, seed=seed + layer, top_k=model.cfg.top_k)
        b.ffn = None


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: Tensor
    synergy: SynergySlice | None
    records: list[RoutingRecord] = field(default_factory=list)
    num_visual: int = 0


def _attention(x: Tensor, b: Block, n_heads: int) -> Tensor:
    n, d = x.shape
    dh = d // n_heads
    q, k, v = matmul(x, b.wq), matmul(x, b.wk), matmul(x, b.wv)
    mask = Tensor(np.triu(np.full((n, n), _MASK), k=1))
    heads = []
    for h in range(n_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = index(q, cols), index(k, cols), index(v, cols)
        scores = add(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(dh)), mask)
        heads.append(matmul(softmax(scores, axis=1), vh))
    return matmul(concat(heads, axis=1) if n_heads > 1 else heads[0], b.wo)


def forward(model: ToyModel, visual: Tensor | np.ndarray, text_ids: Sequence[int], synergy_count: int = 0) -> ForwardOutput:
    cfg = model.cfg
    visual = visual if isinstance(visual, Tensor) else Tensor(np.asarray(visual, dtype=np.float64).reshape(-1, cfg.d_vis))
    if visual.data.ndim != 2 or visual.shape[1] != cfg.d_vis:
        raise DimensionError(f"visual tokens must be P x {cfg.d_vis}, got {visual.shape}")
    ids = np.asarray(text_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
        raise ParameterError(f"text ids must lie in [0, {cfg.vocab})")
    parts = []
    if visual.shape[0]:
        parts.append(add(matmul(visual, model.proj_w), model.proj_b))
    if ids.size:
        parts.append(index(model.token_embedding, ids))
    if not parts and synergy_count == 0:
        raise ParameterError("empty input sequence")
    x = concat(parts, axis=0) if len(parts) > 1 else (parts[0] if parts else None)
    mask: list[int] = []
    if synergy_count:
        if x is None:
            x, mask = index(model.synergy_embedding, slice(0, synergy_count)), list(range(synergy_count))
        else:
            x, mask = insert_synergy_tokens(x, synergy_count, model.synergy_embedding)
    records = []
    for b in model.blocks:
        x = add(_attention(layer_norm(x, b.ln1_g, b.ln1_b, cfg.ln_eps), b, cfg.n_heads), x)
        h = layer_norm(x, b.ln2_g, b.ln2_b, cfg.ln_eps)
        if b.moe is not None:
            y, rec = moe_forward(h, b.moe)
            records.append(rec)
        else:
            y = expert_forward(h, b.ffn)
        x = add(y, x)
    hidden = layer_norm(x, model.lnf_g, model.lnf_b, cfg.ln_eps)
    logits = matmul(hidden, model.head)
    synergy = extract_synergy(hidden, mask) if mask else None
    return ForwardOutput(logits, hidden, synergy, records, visual.shape[0])


def text_cross_entropy(out: ForwardOutput, text_ids: Sequence[int]) -> Tensor:
    """Next-token loss over the text span: position P+i predicts text_ids[i+1]."""
    ids = list(text_ids)
    if len(ids) < 2:
        raise ParameterError("need at least two text tokens for a next-token loss")
    p = out.num_visual
    rows = index(out.logits, slice(p, p + len(ids) - 1))
    return cross_entropy(rows, ids[1:])
