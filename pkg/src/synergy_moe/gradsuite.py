"""Finite-difference verification of every differentiable path.

Single primitives are checked in isolation: the registered backward rule is
compared against central differences of the registered forward rule, so a
broken rule is reported under its own op name. Composite paths (expert FFN,
MoE layer, alignment projectors, a two-layer model) go through the tape and
``grad_check``. Paths that contain a top-k selection are sampled only where
every selection margin is wide enough that a finite-difference step cannot
flip it; otherwise the draw is retried with the next sub-seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import derive_seed
from .model import ModelConfig, forward, init_model, text_cross_entropy, upcycle_model
from .moe import expert_forward, init_expert, load_balance_loss, moe_forward, upcycle_from_dense
from .synergy import SynergySlice, coarse_loss, init_projector, mock_teachers, project_synergy
from .tensor import PRIMITIVES, Tensor, add, grad_check, mul, scale, tsum

__all__ = ["PathResult", "GradReport", "run_grad_suite", "OP_CASES", "PATHS", "TOL", "TOL_TOPK"]

TOL = 1e-6
TOL_TOPK = 1e-4
EPS = 1e-5
MIN_MARGIN = 1e-3
MAX_RETRIES = 50


@dataclass
class PathResult:
    name: str
    tolerance: float
    worst: float = 0.0
    worst_seed: int | None = None
    seeds: int = 0
    retries: int = 0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.worst <= self.tolerance


@dataclass
class GradReport:
    results: list[PathResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[PathResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            extra = f" error={r.error}" if r.error else ""
            out.append(
                f"{status} {r.name:<22} worst_rel_err={r.worst:.3e} tol={r.tolerance:.0e} "
                f"seeds={r.seeds} retries={r.retries}{extra}"
            )
        return out


# ---------------------------------------------------------------- single primitives


def _check_primitive(op: str, arrays: list[np.ndarray], attrs: dict, rng: np.random.Generator) -> float:
    fwd = PRIMITIVES[op]
    out, vjp = fwd(*arrays, **attrs)
    weights = rng.normal(size=np.shape(out))
    grads = vjp(weights)
    worst = 0.0
    for i, a in enumerate(arrays):
        if not np.issubdtype(np.asarray(a).dtype, np.floating):
            continue
        flat = a.reshape(-1)
        g = np.asarray(grads[i]).reshape(-1)
        for c in range(flat.size):
            orig = flat[c]
            flat[c] = orig + EPS
            fp = float(np.sum(fwd(*arrays, **attrs)[0] * weights))
            flat[c] = orig - EPS
            fm = float(np.sum(fwd(*arrays, **attrs)[0] * weights))
            flat[c] = orig
            num = (fp - fm) / (2 * EPS)
            worst = max(worst, abs(g[c] - num) / max(1.0, abs(num)))
    return worst


def _n(rng, *shape):
    return rng.normal(size=shape)


# op -> builder(rng) returning (arrays, attrs)
OP_CASES: dict[str, Callable] = {
    "add": lambda r: ([_n(r, 3, 4), _n(r, 4)], {}),
    "sub": lambda r: ([_n(r, 3, 4), _n(r, 3, 1)], {}),
    "mul": lambda r: ([_n(r, 3, 4), _n(r, 3, 4)], {}),
    "div": lambda r: ([_n(r, 3, 4), 1.5 + r.random((1, 4))], {}),
    "scale": lambda r: ([_n(r, 3, 4)], {"c": float(r.normal())}),
    "matmul": lambda r: ([_n(r, 3, 5), _n(r, 5, 2)], {}),
    "transpose": lambda r: ([_n(r, 3, 5)], {}),
    "reshape": lambda r: ([_n(r, 3, 4)], {"shape": (2, 6)}),
    "sum": lambda r: ([_n(r, 3, 4)], {"axis": 0}),
    "softmax": lambda r: ([_n(r, 3, 5)], {"axis": 1}),
    "layer_norm": lambda r: ([_n(r, 3, 6), _n(r, 6), _n(r, 6)], {"eps": 1e-5}),
    "silu": lambda r: ([3 * _n(r, 3, 5)], {}),
    "index": lambda r: ([_n(r, 5, 3)], {"key": np.array([0, 3, 3, 1])}),
    "scatter_rows": lambda r: ([_n(r, 4, 3)], {"rows": np.array([2, 0, 2, 5]), "n_rows": 6}),
    "concat": lambda r: ([_n(r, 2, 3), _n(r, 4, 3)], {"axis": 0}),
    "mse": lambda r: ([_n(r, 3, 4), _n(r, 3, 4)], {}),
    "cross_entropy": lambda r: ([_n(r, 4, 6)], {"targets": r.integers(0, 6, size=4)}),
}


# ---------------------------------------------------------------- composite paths


def _margin(probs: np.ndarray, k: int) -> float:
    """Smallest gap guarding the argmax and the top-k cut over all tokens."""
    s = -np.sort(-np.asarray(probs), axis=1)
    gaps = [s[:, 0] - s[:, 1]] if s.shape[1] > 1 else []
    if k < s.shape[1]:
        gaps.append(s[:, k - 1] - s[:, k])
    return float(min(g.min() for g in gaps)) if gaps else float("inf")


def _path_expert(rng):
    e = init_expert(rng, 6, 10)
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    w = rng.normal(size=(5, 6))
    return (lambda: tsum(mul(expert_forward(x, e), Tensor(w)))), [x] + e.parameters(), None


def _path_moe(rng):
    dense = init_expert(rng, 6, 10)
    layer = upcycle_from_dense(dense, 4, noise_scale=0.3, seed=int(rng.integers(1 << 31)), top_k=2)
    layer.router.w_router.data[...] = rng.normal(size=(6, 4))
    x = Tensor(rng.normal(size=(7, 6)), requires_grad=True)
    w = rng.normal(size=(7, 6))

    def f():
        y, rec = moe_forward(x, layer)
        return add(tsum(mul(y, Tensor(w))), load_balance_loss(rec, 4))

    _, rec = moe_forward(x, layer)
    return f, [x] + layer.parameters(), _margin(rec.probs.data, 2)


def _path_projectors(rng):
    proj = init_projector(rng, 6, 4, 5, hidden=7)
    h = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    teach = mock_teachers(int(rng.integers(1 << 31)), 3, 4, 5)
    return (lambda: coarse_loss(*project_synergy(SynergySlice(h), proj), teach)), [h] + proj.parameters(), None


def _path_e2e(rng, alpha: float = 0.01):
    cfg = ModelConfig(d_vis=6, d_model=8, d_hidden=12, n_heads=2, vocab=16, total_layers=2, schedule="full",
                      num_experts=4, top_k=2, synergy_tokens=2, temporal_dim=3, spatial_dim=3)
    model = init_model(cfg, int(rng.integers(1 << 31)))
    upcycle_model(model, 0.3, int(rng.integers(1 << 31)))
    for _, layer in model.moe_layers():
        layer.router.w_router.data[...] = rng.normal(size=layer.router.w_router.shape)
    visual = rng.normal(size=(3, cfg.d_vis))
    ids = [int(t) for t in rng.integers(0, cfg.vocab, size=4)]
    teach = mock_teachers(int(rng.integers(1 << 31)), 2, 3, 3)

    def f():
        out = forward(model, visual, ids, synergy_count=2)
        ce = text_cross_entropy(out, ids)
        coarse = coarse_loss(*project_synergy(out.synergy, model.alignment), teach)
        aux = scale(add(load_balance_loss(out.records[0], 4), load_balance_loss(out.records[1], 4)), 0.5)
        return add(add(ce, coarse), scale(aux, alpha))

    out = forward(model, visual, ids, synergy_count=2)
    margin = min(_margin(r.probs.data, 2) for r in out.records)
    return f, model.parameters(), margin


# name -> (builder, tolerance, max_coords)
PATHS: dict[str, tuple[Callable, float, int | None]] = {
    "expert_ffn": (_path_expert, TOL, None),
    "moe_top2_of_4": (_path_moe, TOL_TOPK, 16),
    "alignment_projectors": (_path_projectors, TOL, None),
    "e2e_two_layer_model": (_path_e2e, TOL_TOPK, 2),
}


def run_grad_suite(seed: int = 0, n_seeds: int = 20, paths: list[str] | None = None) -> GradReport:
    """Every primitive and every composite path, ``n_seeds`` random draws each."""
    t0 = time.perf_counter()
    report = GradReport()
    names = paths if paths is not None else [f"op:{o}" for o in OP_CASES] + list(PATHS)
    for name in names:
        if name.startswith("op:"):
            res = PathResult(name, TOL)
            op = name[3:]
            for s in range(n_seeds):
                rng = np.random.default_rng(derive_seed(seed, f"{name}/{s}"))
                arrays, attrs = OP_CASES[op](rng)
                try:
                    err = _check_primitive(op, arrays, attrs, rng)
                except Exception as exc:  # a broken rule must be reported, not crash the suite
                    res.error = f"{type(exc).__name__}: {exc}"
                    break
                res.seeds += 1
                if err > res.worst or res.worst_seed is None:
                    res.worst, res.worst_seed = max(err, res.worst), s
            report.results.append(res)
            continue
        builder, tol, max_coords = PATHS[name]
        res = PathResult(name, tol)
        s = attempt = 0
        while res.seeds < n_seeds and res.error is None:
            rng = np.random.default_rng(derive_seed(seed, f"{name}/{s}/{attempt}"))
            try:
                f, params, margin = builder(rng)
                if margin is not None and margin < MIN_MARGIN:
                    attempt += 1
                    res.retries += 1
                    if attempt > MAX_RETRIES:
                        res.error = f"no draw with routing margin >= {MIN_MARGIN} after {MAX_RETRIES} retries"
                    continue
                err = grad_check(f, params, eps=EPS, max_coords=max_coords, seed=s)
            except Exception as exc:
                res.error = f"{type(exc).__name__}: {exc}"
                break
            res.seeds += 1
            if err >= res.worst:
                res.worst, res.worst_seed = err, s
            s, attempt = s + 1, 0
        report.results.append(res)
    report.seconds = time.perf_counter() - t0
    return report
