"""Run-directory orchestration: staged training with resume, routing reports and ablations."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .csqa import read_jsonl
from .data import SyntheticWorld, batches, derive_seed
from .errors import ConfigError, DataError
from .model import ToyModel, init_model, upcycle_model
from .moe import build_schedule, expert_shares
from .training import STAGES, StageReport, evaluate_stage, train_stage

__all__ = [
    "run_pipeline",
    "route_stats",
    "routing_summary",
    "run_ablation",
    "write_csv",
    "ABLATION_AXES",
    "REFERENCE_LAYERS",
]

REFERENCE_LAYERS = 28
ABLATION_AXES = {
    "experts": [("M=2", {"num_experts": 2}), ("M=3", {"num_experts": 3}), ("M=4", {"num_experts": 4})],
    "placement": [
        ("first_half", {"schedule": "first_half"}),
        ("last_half", {"schedule": "last_half"}),
        ("interval(4)", {"schedule": "interval(4)"}),
        ("full", {"schedule": "full"}),
    ],
}

CURVE_FIELDS = ("step", "total", "cross_entropy", "coarse", "aux", "lr", "phase", "routing_entropy")
ROUTING_FIELDS = ("step", "layer", "expert", "token_fraction", "mean_prob")


def write_csv(path: Path | None, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Comma-separated, header row, LF line ends; floats at full precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    text = buf.getvalue()
    if path is not None:
        path.write_text(text, encoding="utf-8", newline="")
    return text


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _csqa_questions(cfg: RunConfig) -> list[tuple[str, str]]:
    qas = read_jsonl(cfg.csqa_path)
    if not qas:
        raise DataError(f"CSQA file {cfg.csqa_path} holds no QA pairs")
    return [(q.question, q.answer) for q in qas]


def _fresh_model(cfg: RunConfig, upcycled: bool) -> ToyModel:
    model = init_model(cfg.model_config(), derive_seed(cfg.seed, "model"))
    if upcycled:
        upcycle_model(model, cfg.noise_scale, derive_seed(cfg.seed, "upcycle"))
    return model


def _save_model(model: ToyModel, path: Path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **model.state())


def _load_model(cfg: RunConfig, stage: str, path: Path) -> ToyModel:
    model = _fresh_model(cfg, upcycled=stage.startswith("stage_2"))
    with np.load(path) as z:
        model.load_state({k: z[k] for k in z.files})
    return model


def _stage_report_doc(cfg: RunConfig, rep: StageReport, before: dict, after: dict) -> dict:
    doc = {
        "stage": rep.stage,
        "seed": cfg.seed,
        "steps": rep.steps,
        "stage_config": rep.config,
        "alpha": cfg.alpha,
        "pool_loss_initial": before,
        "pool_loss_final": after,
        "batch_loss_initial": {k: rep.initial(k) for k in ("total", "cross_entropy", "coarse", "aux")},
        "batch_loss_final": {k: rep.final(k) for k in ("total", "cross_entropy", "coarse", "aux")},
        "delta_norms": rep.delta_norms,
    }
    if "coarse" in before and before["coarse"] > 0:
        doc["coarse_reduction"] = 1.0 - after["coarse"] / before["coarse"]
    if rep.final_probs:
        doc["routing_final"] = {str(layer): routing_summary(p) for layer, p in rep.final_probs.items()}
    return doc


def run_pipeline(cfg: RunConfig, out: str | Path, log=None) -> Path:
    """Train the configured stages into ``out``; stages whose outputs already exist are reused."""
    cfg.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = out / "config.json"
    if echo.exists():
        prior = json.loads(echo.read_text(encoding="utf-8"))
        mismatched = sorted(k for k in prior if k != "stages" and prior.get(k) != cfg.to_dict().get(k))
        if mismatched:
            raise ConfigError(
                f"run directory {out} was created with a different config (keys {mismatched}); use a new --out"
            )
    _dump_json(echo, cfg.to_dict())
    if not cfg.stages:
        return out

    world = SyntheticWorld(
        derive_seed(cfg.seed, "world"), vocab=cfg.vocab, d_vis=cfg.d_vis, synergy_tokens=cfg.synergy_tokens,
        temporal_dim=cfg.temporal_dim, spatial_dim=cfg.spatial_dim,
    )
    questions = _csqa_questions(cfg) if "stage_2_2" in cfg.stages else None

    first = STAGES.index(cfg.stages[0])
    model = None
    if first > 0:
        prev = STAGES[first - 1]
        ckpt = out / prev / "model.npz"
        if not ckpt.is_file():
            raise ConfigError(f"{cfg.stages[0]} needs the {prev} checkpoint at {ckpt}; include {prev} in stages")
        model = _load_model(cfg, prev, ckpt)
    else:
        model = _fresh_model(cfg, upcycled=False)

    for name in cfg.stages:
        sdir = out / name
        ckpt = sdir / "model.npz"
        if (sdir / "report.json").is_file() and ckpt.is_file():
            if log:
                log(f"{name}: reusing finished stage in {sdir}")
            model = _load_model(cfg, name, ckpt)
            continue
        sdir.mkdir(exist_ok=True)
        if name == "stage_2_1" and not model.is_upcycled:
            upcycle_model(model, cfg.noise_scale, derive_seed(cfg.seed, "upcycle"))
        stage = cfg.stage_config(name)
        pool = world.pool(name, cfg.pool_size, derive_seed(cfg.seed, "data"), questions, cfg.instruction_mix)
        before = evaluate_stage(model, pool, stage, cfg.alpha, batch_size=cfg.batch_size)
        rep = train_stage(
            model, stage, batches(pool, cfg.batch_size, derive_seed(cfg.seed, f"batches/{name}")),
            seed=cfg.seed, alpha=cfg.alpha, log_every=cfg.log_every,
        )
        after = evaluate_stage(model, pool, stage, cfg.alpha, batch_size=cfg.batch_size)
        rep.config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in stage.__dict__.items()}
        write_csv(sdir / "curve.csv", CURVE_FIELDS, [[r[k] for k in CURVE_FIELDS] for r in rep.curve])
        write_csv(
            sdir / "routing.csv", ROUTING_FIELDS,
            [[r.step, r.layer, r.expert, r.token_fraction, r.mean_prob] for r in rep.routing],
        )
        if rep.final_probs:
            with open(sdir / "routing_final.npz", "wb") as fh:
                np.savez(fh, **{f"layer_{k}": v for k, v in rep.final_probs.items()})
        _save_model(model, ckpt)
        _dump_json(sdir / "report.json", _stage_report_doc(cfg, rep, before, after))
        if log:
            log(f"{name}: {stage.steps} steps, pool loss {before} -> {after}")
    return out


# ---------------------------------------------------------------- routing statistics


def routing_summary(probs: np.ndarray) -> dict:
    frac, mp = expert_shares(probs)
    m = probs.shape[1]
    return {
        "tokens": int(probs.shape[0]),
        "token_fraction": [float(v) for v in frac],
        "mean_prob": [float(v) for v in mp],
        "max_share": float(frac.max()),
        "min_share": float(frac.min()),
        "load_balance_loss": float(m * np.dot(frac, mp)),
    }


def _find_routing(run: Path) -> Path:
    if (run / "routing_final.npz").is_file():
        return run / "routing_final.npz"
    for name in reversed(STAGES):
        p = run / name / "routing_final.npz"
        if p.is_file():
            return p
    raise DataError(f"no routing telemetry (routing_final.npz) under {run}; train a stage_2 stage first")


def route_stats(run_dir: str | Path) -> tuple[list[list], dict]:
    """Per-layer per-expert shares recomputed from the raw final routing probabilities."""
    path = _find_routing(Path(run_dir))
    with np.load(path) as z:
        layers = sorted(((int(k.split("_", 1)[1]), z[k]) for k in z.files), key=lambda t: t[0])
    if not layers:
        raise DataError(f"{path} holds no routing layers")
    rows, summary = [], {"source": str(path), "layers": {}}
    for layer, probs in layers:
        s = routing_summary(probs)
        summary["layers"][str(layer)] = s
        rows += [[layer, e, s["token_fraction"][e], s["mean_prob"][e]] for e in range(probs.shape[1])]
    every = summary["layers"].values()
    summary["max_share"] = max(s["max_share"] for s in every)
    summary["min_share"] = min(s["min_share"] for s in every)
    summary["load_balance_loss"] = float(np.mean([s["load_balance_loss"] for s in every]))
    return rows, summary


# ---------------------------------------------------------------- ablation

ABLATION_FIELDS = (
    "axis", "variant", "num_experts", "schedule", "moe_layers", "moe_layers_at_28",
    "final_cross_entropy", "final_coarse", "final_aux", "max_share", "min_share",
)


def run_ablation(cfg: RunConfig, axis: str, out: str | Path, log=None) -> list[list]:
    """One pipeline per variant of ``axis``; returns (and writes) the comparison table."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"ablation axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    out = Path(out)
    variants = [(label, cfg.replace(**change)) for label, change in ABLATION_AXES[axis]]
    for _, v in variants:
        v.validate()
    rows = []
    for label, v in variants:
        vdir = out / axis / label.replace("(", "_").replace(")", "").replace("=", "")
        run_pipeline(v, vdir, log)
        finals: dict[str, float] = {}
        for name in v.stages:
            rep = json.loads((vdir / name / "report.json").read_text(encoding="utf-8"))
            finals.update(rep["pool_loss_final"])
        try:
            _, summary = route_stats(vdir)
            shares = (summary["max_share"], summary["min_share"])
        except DataError:
            shares = ("", "")
        rows.append([
            axis, label, v.num_experts, v.schedule,
            build_schedule(v.layers, v.schedule).num_moe_layers,
            build_schedule(REFERENCE_LAYERS, v.schedule).num_moe_layers,
            finals.get("cross_entropy", ""), finals.get("coarse", ""), finals.get("aux", ""), *shares,
        ])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / f"ablation_{axis}.csv", ABLATION_FIELDS, rows)
    return rows
