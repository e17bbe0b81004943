"""Head-weight importances, Integrated Gradients and modality-level weighted attribution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .fusion import FusionModel, Member

MIN_IG_STEPS = 16


class XaiError(ValueError):
    pass


@dataclass
class ModelWeightReport:
    members: list[Member]
    per_model_weight: np.ndarray
    per_modality_weight: dict[str, float] = field(default_factory=dict)

    def within_modality(self, modality: str) -> dict[Member, float]:
        """Relative weights of the members of one modality, summing to 1."""
        sel = [(m, w) for m, w in zip(self.members, self.per_model_weight) if m[0] == modality]
        total = math.fsum(w for _, w in sel)
        if total == 0:
            raise XaiError(f"modality {modality!r} has zero total weight")
        return {m: w / total for m, w in sel}

    def to_dict(self) -> dict:
        return {"per_model": {f"{m}/{a}": float(w) for (m, a), w in zip(self.members, self.per_model_weight)},
                "per_modality": dict(self.per_modality_weight)}


def model_weights(model: FusionModel) -> ModelWeightReport:
    """Per-member share of absolute first-layer head weight over its c-block of inputs."""
    if model.kind not in ("jlf", "lf") or model.head_net is None:
        raise XaiError("model weights need a joint-late or late-fusion head")
    if not model.trained:
        raise XaiError("head has not been trained")
    W = np.abs(model.head_net.layers[0].weights)
    c = model.spec.c
    raw = np.array([W[:, j * c:(j + 1) * c].sum() for j in range(len(model.spec.members))])
    total = raw.sum()
    if total == 0:
        raise XaiError("head weights are all zero")
    w = raw / total
    per_mod: dict[str, float] = {}
    for (mod, _), v in zip(model.spec.members, w):
        per_mod[mod] = per_mod.get(mod, 0.0) + float(v)
    return ModelWeightReport(list(model.spec.members), w, per_mod)


def _logit_grad(net: nn.DenseNetwork, X: np.ndarray, target: int) -> np.ndarray:
    acts = nn.forward_cache(net, X)
    g = np.zeros_like(acts[-1])
    g[:, target] = 1.0
    return nn.backprop(net, acts, g, need_input_grad=True)[1]


def integrated_gradients(net: nn.DenseNetwork, x, baseline=None, target_class: int = 1,
                         steps: int = 64) -> np.ndarray:
    """IG of the target logit along the straight path from ``baseline`` to ``x``.

    Midpoint Riemann sum with ``steps`` evaluations; baseline defaults to zeros.
    """
    x = np.asarray(x, dtype=float)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float)
    if x.shape != baseline.shape or x.ndim != 1:
        raise nn.ShapeError("x and baseline must be vectors of equal length")
    if x.shape[0] != net.input_dim:
        raise nn.ShapeError(f"x has {x.shape[0]} features, network expects {net.input_dim}")
    if steps < MIN_IG_STEPS:
        raise XaiError(f"need at least {MIN_IG_STEPS} steps")
    if not 0 <= target_class < net.output_dim:
        raise XaiError(f"target_class {target_class} out of range")
    alphas = (np.arange(steps) + 0.5) / steps
    path = baseline + alphas[:, None] * (x - baseline)
    grads = _logit_grad(net, path, target_class)
    return (x - baseline) * grads.mean(axis=0)


@dataclass
class AttributionRecord:
    model_id: str
    feature_importances: np.ndarray
    baseline: np.ndarray
    ig_steps: int

    def __post_init__(self):
        if self.ig_steps < MIN_IG_STEPS:
            raise XaiError(f"ig_steps must be at least {MIN_IG_STEPS}")


def attribute(net: nn.DenseNetwork, x, model_id: str, baseline=None, target_class: int = 1,
              steps: int = 64) -> AttributionRecord:
    x = np.asarray(x, dtype=float)
    baseline = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=float)
    return AttributionRecord(model_id, integrated_gradients(net, x, baseline, target_class, steps),
                             baseline, steps)


def weighted_xai(attributions: Sequence[AttributionRecord | np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted sum of per-model attributions with weights renormalized to 1."""
    vecs = [np.asarray(a.feature_importances if isinstance(a, AttributionRecord) else a, dtype=float)
            for a in attributions]
    w = np.asarray(weights, dtype=float)
    if not vecs or len(vecs) != len(w):
        raise XaiError("one weight per attribution vector required")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise XaiError("attribution vectors differ in length")
    if np.any(w < 0):
        raise XaiError("weights must be non-negative")
    total = w.sum()
    if total == 0:
        raise XaiError("all weights are zero")
    return (w / total) @ np.stack(vecs)


def explain_instance(model: FusionModel, inputs: dict[str, np.ndarray], target_class: int = 1,
                     steps: int = 64, baselines: dict[str, np.ndarray] | None = None) -> dict:
    """Per-member IG, head weights and the weighted per-modality attribution for one instance."""
    report = model_weights(model)
    records = {}
    for (mod, arch), net in zip(model.spec.members, model.member_nets):
        base = None if baselines is None else baselines.get(mod)
        records[(mod, arch)] = attribute(net, inputs[mod], f"{mod}/{arch}", base, target_class, steps)
    combined = {}
    for mod in dict.fromkeys(m for m, _ in model.spec.members):
        mem = [(m, w) for m, w in zip(report.members, report.per_model_weight) if m[0] == mod]
        combined[mod] = weighted_xai([records[m] for m, _ in mem], [w for _, w in mem])
    return {
        "weights": report.to_dict(),
        "attributions": {r.model_id: r.feature_importances.tolist() for r in records.values()},
        "weighted": {m: v.tolist() for m, v in combined.items()},
    }
