"""Four-stage training schedule: stage configs, freeze masks, AdamW and the stage loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .data import Sample
from .errors import NonFiniteError, ParameterError, TrainingError
from .model import PARAM_GROUPS, ToyModel, forward, text_cross_entropy
from .moe import MoELayer, RoutingRecord, expert_shares, load_balance_loss, merge_records
from .synergy import coarse_loss, project_synergy
from .tensor import Tape, Tensor, add, backward, scale

__all__ = [
    "STAGES",
    "StageConfig",
    "FreezeMask",
    "default_stage",
    "make_freeze_mask",
    "lr_at",
    "AdamW",
    "TelemetryRow",
    "StageReport",
    "train_stage",
    "routing_rows",
    "router_balance_run",
    "evaluate_stage",
]

STAGES = ("stage_1_1", "stage_1_2", "stage_2_1", "stage_2_2")
LOSS_TERMS = ("cross_entropy", "coarse", "aux")

# Per-stage hyperparameters: lr, weight decay, warmup ratio, schedule.
_TABLE = {
    "stage_1_1": dict(lr=2e-5, weight_decay=0.05, warmup_ratio=0.03, schedule="cosine",
                      trainable=("projector",), losses=("cross_entropy",)),
    "stage_1_2": dict(lr=2e-6, weight_decay=0.05, warmup_ratio=0.03, schedule="cosine",
                      trainable=("ffn_experts",), losses=("cross_entropy",)),
    "stage_2_1": dict(lr=1e-4, weight_decay=0.05, warmup_ratio=0.05, schedule="cosine",
                      trainable=("router", "alignment", "ffn_experts"), losses=("coarse", "aux")),
    "stage_2_2": dict(lr=1e-5, weight_decay=0.1, warmup_ratio=0.05, schedule="constant",
                      trainable=("router", "ffn_experts"), losses=("cross_entropy", "aux")),
}


@dataclass(frozen=True)
class StageConfig:
    name: str
    trainable: tuple[str, ...]
    losses: tuple[str, ...]
    lr: float
    warmup_ratio: float
    schedule: str
    weight_decay: float
    steps: int
    # stage_2_1 only: share of steps with experts frozen before they are released
    phase_a_fraction: float = 0.3

    def __post_init__(self):
        if self.name not in STAGES:
            raise ParameterError(f"unknown stage {self.name!r}; expected one of {STAGES}")
        if not self.lr > 0:
            raise ParameterError(f"{self.name}: lr must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ParameterError(f"{self.name}: warmup_ratio must lie in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ParameterError(f"{self.name}: schedule must be cosine or constant")
        if not self.losses or set(self.losses) - set(LOSS_TERMS):
            raise ParameterError(f"{self.name}: losses must be a nonempty subset of {LOSS_TERMS}")
        if set(self.trainable) - set(PARAM_GROUPS):
            raise ParameterError(f"{self.name}: unknown parameter groups {set(self.trainable) - set(PARAM_GROUPS)}")
        if self.steps < 0 or self.weight_decay < 0:
            raise ParameterError(f"{self.name}: steps and weight_decay must be nonnegative")
        if not 0 <= self.phase_a_fraction <= 1:
            raise ParameterError(f"{self.name}: phase_a_fraction must lie in [0, 1]")

    @property
    def phase_a_steps(self) -> int:
        return round(self.phase_a_fraction * self.steps) if self.name == "stage_2_1" else 0


def default_stage(name: str, steps: int = 100, lr: float | None = None, **overrides) -> StageConfig:
    if name not in _TABLE:
        raise ParameterError(f"unknown stage {name!r}; expected one of {STAGES}")
    kw = dict(_TABLE[name])
    if lr is not None:
        kw["lr"] = lr
    kw.update(overrides)
    return StageConfig(name=name, steps=steps, **kw)


@dataclass(frozen=True)
class FreezeMask:
    flags: dict

    @property
    def trainable_groups(self) -> tuple[str, ...]:
        return tuple(g for g in PARAM_GROUPS if self.flags[g])

    def __getitem__(self, group: str) -> bool:
        return self.flags[group]


def make_freeze_mask(stage: StageConfig | str, phase: str = "B") -> FreezeMask:
    """Trainable groups per stage; stage_2_1 phase "A" keeps the experts frozen."""
    name = stage.name if isinstance(stage, StageConfig) else stage
    if name not in _TABLE:
        raise ParameterError(f"unknown stage {name!r}; expected one of {STAGES}")
    groups = set(_TABLE[name]["trainable"])
    if name == "stage_2_1" and phase == "A":
        groups.discard("ffn_experts")
    return FreezeMask({g: g in groups for g in PARAM_GROUPS})


def lr_at(step: int, cfg: StageConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 (or flat for ``constant``)."""
    warm = round(cfg.warmup_ratio * cfg.steps)
    if step < warm:
        return cfg.lr * step / warm
    if cfg.schedule == "constant" or cfg.steps == warm:
        return cfg.lr
    progress = min(1.0, (step - warm) / (cfg.steps - warm))
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with decoupled weight decay; only the tensors passed to ``step`` move."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[int, list] = {}

    def step(self, params: list[Tensor], lr: float) -> None:
        for p in params:
            if p.grad is None:
                continue
            with np.errstate(over="ignore"):
                finite = np.all(np.isfinite(p.grad * p.grad))
            if not finite:
                raise TrainingError(f"non-finite gradient for parameter {p.name or p.id}")
            st = self.state.setdefault(p.id, [np.zeros_like(p.data), np.zeros_like(p.data), 0])
            m, v, t = st
            t += 1
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            st[2] = t
            mhat = m / (1 - self.b1**t)
            vhat = v / (1 - self.b2**t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)


@dataclass(frozen=True)
class TelemetryRow:
    step: int
    layer: int
    expert: int
    token_fraction: float
    mean_prob: float


def routing_rows(step: int, layers: list[int], records: list[RoutingRecord]) -> list[TelemetryRow]:
    rows = []
    for layer, rec in zip(layers, records):
        frac, mp = expert_shares(rec.probs.data)
        rows += [TelemetryRow(step, layer, e, float(frac[e]), float(mp[e])) for e in range(len(frac))]
    return rows


def routing_entropy(records: list[RoutingRecord]) -> float:
    if not records:
        return 0.0
    ents = []
    for r in records:
        p = np.clip(r.probs.data, 1e-300, 1.0)
        ents.append(float(-(p * np.log(p)).sum(axis=1).mean()))
    return float(np.mean(ents))


@dataclass
class StageReport:
    stage: str
    seed: int
    steps: int
    curve: list[dict] = field(default_factory=list)
    routing: list[TelemetryRow] = field(default_factory=list)
    delta_norms: dict = field(default_factory=dict)
    final_probs: dict = field(default_factory=dict)  # layer -> tokens x M probs at the last logged step
    config: dict = field(default_factory=dict)

    def final(self, term: str) -> float | None:
        return self.curve[-1][term] if self.curve else None

    def initial(self, term: str) -> float | None:
        return self.curve[0][term] if self.curve else None


def _batch_losses(model: ToyModel, batch: list[Sample], stage: StageConfig, alpha: float, synergy_count: int):
    """Per-term batch losses (tensors) and per-layer merged routing records."""
    use_ce = "cross_entropy" in stage.losses
    use_coarse = "coarse" in stage.losses
    syn = synergy_count if use_coarse else 0
    per_layer: dict[int, list[RoutingRecord]] = {}
    terms: dict[str, Tensor] = {}
    ce_parts, coarse_parts = [], []
    layer_ids = [i for i, _ in model.moe_layers()]
    for s in batch:
        out = _guard("forward", lambda: forward(model, s.visual, s.text_ids, syn))
        for layer, rec in zip(layer_ids, out.records):
            per_layer.setdefault(layer, []).append(rec)
        if use_ce:
            ce_parts.append(_guard("cross_entropy", lambda: text_cross_entropy(out, s.text_ids)))
        if use_coarse:
            if s.teachers is None:
                raise TrainingError(f"{stage.name}: sample of task {s.task!r} carries no teacher features")
            coarse_parts.append(_guard("coarse", lambda: coarse_loss(*project_synergy(out.synergy, model.alignment), s.teachers)))
    n = len(batch)
    if ce_parts:
        terms["cross_entropy"] = _guard("cross_entropy", lambda: scale(_sum(ce_parts), 1.0 / n))
    if coarse_parts:
        terms["coarse"] = _guard("coarse", lambda: scale(_sum(coarse_parts), 1.0 / n))
    merged = [merge_records(per_layer[i]) for i in layer_ids]
    if "aux" in stage.losses and merged:
        m = model.cfg.num_experts
        terms["aux"] = _guard(
            "aux", lambda: scale(_sum([load_balance_loss(r, m) for r in merged]), 1.0 / len(merged))
        )
    return terms, layer_ids, merged


def _sum(ts: list[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = add(out, t)
    return out


def _guard(term: str, fn):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in loss term {term!r}: {exc}") from None


def train_stage(
    model: ToyModel,
    stage: StageConfig,
    data: Iterator[list[Sample]],
    seed: int,
    alpha: float = 0.01,
    synergy_count: int | None = None,
    log_every: int = 10,
) -> StageReport:
    """Run ``stage.steps`` AdamW updates on the unfrozen groups; frozen groups never move."""
    if stage.name.startswith("stage_2") and not model.is_upcycled:
        raise TrainingError(f"{stage.name} needs an upcycled model (MoE layers); run upcycle_model first")
    if synergy_count is None:
        synergy_count = model.cfg.synergy_tokens
    report = StageReport(stage.name, seed, stage.steps)
    before = {n: (g, t.data.copy()) for n, g, t in model.named_parameters()}
    opt = AdamW(weight_decay=stage.weight_decay)
    named = list(model.named_parameters())

    for step in range(stage.steps):
        phase = "A" if step < stage.phase_a_steps else "B"
        mask = make_freeze_mask(stage, phase)
        trainable = [t for _, g, t in named if mask[g]]
        for _, _, t in named:
            t.grad = None
        batch = next(data)
        with Tape() as tape:
            terms, layer_ids, merged = _batch_losses(model, batch, stage, alpha, synergy_count)
            weighted = [terms[k] if k != "aux" else scale(terms[k], alpha) for k in LOSS_TERMS if k in terms]
            total = _guard("total", lambda: _sum(weighted))
        backward(total, tape)
        lr = lr_at(step, stage)
        opt.step(trainable, lr)

        row = {"step": step, "total": total.item()}
        for k in LOSS_TERMS:
            row[k] = terms[k].item() if k in terms else 0.0
        row["lr"] = lr
        row["phase"] = phase
        row["routing_entropy"] = routing_entropy(merged)
        report.curve.append(row)
        if merged and (step % log_every == 0 or step == stage.steps - 1):
            report.routing += routing_rows(step, layer_ids, merged)
            report.final_probs = {layer: r.probs.data.copy() for layer, r in zip(layer_ids, merged)}

    for n, g, t in model.named_parameters():
        g0, old = before.get(n, (g, None))
        if old is None:
            continue
        d = float(np.sum((t.data - old) ** 2))
        report.delta_norms[g] = report.delta_norms.get(g, 0.0) + d
    report.delta_norms = {g: math.sqrt(v) for g, v in report.delta_norms.items()}
    return report


def evaluate_stage(
    model: ToyModel, pool: list[Sample], stage: StageConfig, alpha: float = 0.01,
    synergy_count: int | None = None, batch_size: int = 8,
) -> dict[str, float]:
    """Mean of each stage loss term over a whole pool, without recording a tape."""
    if synergy_count is None:
        synergy_count = model.cfg.synergy_tokens
    sums: dict[str, float] = {}
    weight = 0
    for start in range(0, len(pool), batch_size):
        chunk = pool[start : start + batch_size]
        terms, _, _ = _batch_losses(model, chunk, stage, alpha, synergy_count)
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v.item() * len(chunk)
        weight += len(chunk)
    return {k: sums[k] / weight for k in LOSS_TERMS if k in sums}


def router_balance_run(
    layer: MoELayer, x: Tensor, alpha: float, steps: int = 200, lr: float = 0.05
) -> list[float]:
    """Train only the router of ``layer`` on ``alpha * L_aux`` over a fixed batch.

    Returns the max expert token share after each step (plus the initial one).
    """
    from .moe import route

    w = layer.router.w_router
    opt = AdamW()
    shares = [float(expert_shares(route(x, layer).probs.data)[0].max())]
    for _ in range(steps):
        w.grad = None
        with Tape() as tape:
            rec = route(x, layer)
            loss = scale(load_balance_loss(rec, layer.num_experts), alpha)
        backward(loss, tape)
        opt.step([w], lr)
        shares.append(float(expert_shares(route(x, layer).probs.data)[0].max()))
    return shares
