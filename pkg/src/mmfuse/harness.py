"""Synthetic multimodal data, split construction and experiment orchestration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.model_selection import StratifiedKFold, train_test_split

from . import fusion as fu
from . import nn
from .selection import ApplicationMatrix, SelectionResult, optimize
from .unimodal import MlpSpec, PredictionMatrix, Preprocessor, TabularDataset, predict, train_unimodal

log = logging.getLogger(__name__)

DEFAULT_VAL_FRACTION = 2 / 9


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- synthetic data


LABEL_RULES = ("shift", "conjunctive")


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 2000
    modality_dims: tuple[int, ...] = (12, 12)
    signal_strength: tuple[float, ...] = (1.0, 1.0)
    cross_noise: float = 0.0
    n_centers: int = 4
    center_shift: float = 0.3
    seed: int = 0
    modality_names: tuple[str, ...] = ()
    latent_noise: float = 1.0
    informative_fraction: float = 0.5
    missing_rate: float = 0.0
    label_rule: str = "shift"  # "shift" | "conjunctive"
    threshold: float = 0.0  # conjunctive rule only

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "signal_strength", tuple(float(s) for s in self.signal_strength))
        if not self.modality_names:
            object.__setattr__(self, "modality_names",
                               tuple(f"mod{i}" for i in range(len(self.modality_dims))))
        object.__setattr__(self, "modality_names", tuple(self.modality_names))
        if len(self.signal_strength) != len(self.modality_dims) or len(self.modality_names) != len(self.modality_dims):
            raise ConfigError("modality_dims, signal_strength and modality_names must align")
        if any(d < 1 for d in self.modality_dims) or self.n_centers < 1 or self.n_samples < 1:
            raise ConfigError("dims, n_centers and n_samples must be at least 1")
        if any(s < 0 for s in self.signal_strength):
            raise ConfigError("signal_strength must be non-negative")
        if not 0 <= self.cross_noise <= 1 or not 0 <= self.missing_rate < 1:
            raise ConfigError("cross_noise must lie in [0, 1] and missing_rate in [0, 1)")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"label_rule must be one of {LABEL_RULES}")


@dataclass
class MultimodalDataset:
    modalities: dict[str, TabularDataset]
    labels: np.ndarray
    centers: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def column_kinds(self) -> dict[str, list[str]]:
        return {m: ["continuous"] * ds.n_features for m, ds in self.modalities.items()}

    def concat(self, other: "MultimodalDataset") -> "MultimodalDataset":
        mods = {}
        for m, ds in self.modalities.items():
            o = other.modalities[m]
            mods[m] = TabularDataset(ds.feature_names, np.vstack([ds.features, o.features]),
                                     np.concatenate([ds.labels, o.labels]),
                                     np.concatenate([ds.center_ids, o.center_ids]), ds.ids + o.ids,
                                     np.vstack([ds.missing_mask, o.missing_mask]))
        return MultimodalDataset(mods, np.concatenate([self.labels, other.labels]),
                                 np.concatenate([self.centers, other.centers]), self.ids + other.ids)


def _structure(cfg: SynthConfig, n_center_sets: int):
    rng = np.random.default_rng([cfg.seed, 0])
    loadings, offsets = [], []
    for d in cfg.modality_dims:
        n_inf = max(1, int(round(cfg.informative_fraction * d)))
        w = np.zeros(d)
        w[:n_inf] = rng.normal(size=n_inf)
        loadings.append(w / np.linalg.norm(w))
    for _ in range(n_center_sets):
        per_center = []
        for _ in range(cfg.n_centers):
            per_center.append([cfg.center_shift * _unit(rng, d) for d in cfg.modality_dims])
        offsets.append(per_center)
    return loadings, offsets


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.normal(size=d)
    return v / np.linalg.norm(v)


def generate(cfg: SynthConfig, external: bool = False, n_samples: int | None = None) -> MultimodalDataset:
    """Draw a labelled multimodal dataset.

    Each modality is a label-dependent shift along a fixed loading vector,
    plus a latent noise term shared across modalities in proportion to
    ``cross_noise``, plus unit isotropic noise and a per-center offset.
    ``external=True`` draws new centers (ids continue after the development
    ones) and fresh samples from the same family.

    With ``label_rule="conjunctive"`` every modality instead carries its own
    standard normal factor, the shift is ``signal * factor`` and the label is
    1 only when all factors exceed ``threshold``. Each modality then sees one
    half of an AND, which a learned combination can exploit and a vote cannot.
    """
    loadings, offsets = _structure(cfg, 2)
    rng = np.random.default_rng([cfg.seed, 2 if external else 1])
    n = n_samples or cfg.n_samples
    if cfg.label_rule == "shift":
        y = rng.integers(0, 2, size=n)
        factors = np.tile(2.0 * y - 1.0, (len(cfg.modality_dims), 1))
    else:
        factors = rng.normal(size=(len(cfg.modality_dims), n))
        y = np.all(factors > cfg.threshold, axis=0).astype(int)
    center = rng.integers(0, cfg.n_centers, size=n)
    shared = rng.normal(size=n)
    first_center = cfg.n_centers if external else 0
    prefix = "ext" if external else "dev"
    ids = [f"{prefix}{i:05d}" for i in range(n)]
    center_ids = np.array([f"c{first_center + c}" for c in center])
    off = offsets[1 if external else 0]
    mods = {}
    for i, (name, d) in enumerate(zip(cfg.modality_names, cfg.modality_dims)):
        own = rng.normal(size=n)
        latent = cfg.latent_noise * (math.sqrt(cfg.cross_noise) * shared + math.sqrt(1 - cfg.cross_noise) * own)
        X = (cfg.signal_strength[i] * factors[i] + latent)[:, None] * loadings[i] + rng.normal(size=(n, d))
        X += np.stack([off[c][i] for c in center])
        if cfg.missing_rate > 0:
            X[rng.random(size=X.shape) < cfg.missing_rate] = np.nan
        mods[name] = TabularDataset([f"{name}_f{j}" for j in range(d)], X, y, center_ids, list(ids))
    return MultimodalDataset(mods, y, center_ids, ids)


# ---------------------------------------------------------------- splits


@dataclass
class Fold:
    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        conv = (lambda a: [ids[i] for i in a]) if ids is not None else (lambda a: a.tolist())
        return {"name": self.name, "train": conv(self.train), "val": conv(self.val), "test": conv(self.test)}


@dataclass
class SplitPlan:
    kind: str  # "cv" | "loco" | "ev"
    folds: list[Fold]

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        return {"kind": self.kind, "folds": [f.to_dict(ids) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict, ids: Sequence[str] | None = None) -> "SplitPlan":
        index = {s: i for i, s in enumerate(ids)} if ids is not None else None
        conv = (lambda a: np.array([index[s] for s in a], dtype=int)) if index else (lambda a: np.array(a, dtype=int))
        return cls(d["kind"], [Fold(f["name"], conv(f["train"]), conv(f["val"]), conv(f["test"]))
                               for f in d["folds"]])


def _train_val(pool: np.ndarray, labels: np.ndarray, val_fraction: float, seed: int):
    if len(pool) < 2:
        raise ValueError(f"cannot split {len(pool)} row(s) into train and validation")
    strat = labels[pool]
    if np.min(np.bincount(strat)) < 2:
        strat = None
    tr, va = train_test_split(pool, test_size=val_fraction, random_state=seed, stratify=strat)
    return np.sort(tr), np.sort(va)


def make_cv_splits(labels, k_folds: int = 10, seed: int = 0,
                   val_fraction: float = DEFAULT_VAL_FRACTION) -> SplitPlan:
    """Stratified k-fold test sets; the rest split train/val stratified (70/20/10 at k=10)."""
    labels = np.asarray(labels, dtype=int)
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    counts = np.bincount(labels)
    if counts[counts > 0].min() < k_folds:
        raise ValueError(f"smallest class has {counts[counts > 0].min()} samples, fewer than {k_folds} folds")
    skf = StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=seed)
    folds = []
    for f, (pool, test) in enumerate(skf.split(np.zeros(len(labels)), labels)):
        tr, va = _train_val(pool, labels, val_fraction, seed + f)
        folds.append(Fold(f"cv{f}", tr, va, np.sort(test)))
    return SplitPlan("cv", folds)


def make_loco_splits(center_ids, labels=None, val_fraction: float = DEFAULT_VAL_FRACTION,
                     seed: int = 0) -> SplitPlan:
    """One fold per center: that center is the test set, the rest is split train/val."""
    centers = np.asarray(center_ids)
    uniq = sorted(set(centers.tolist()))
    if len(uniq) < 2:
        raise ValueError("leave-one-center-out needs at least two centers")
    labels = np.zeros(len(centers), dtype=int) if labels is None else np.asarray(labels, dtype=int)
    folds = []
    for f, c in enumerate(uniq):
        test = np.flatnonzero(centers == c)
        pool = np.flatnonzero(centers != c)
        tr, va = _train_val(pool, labels, val_fraction, seed + f)
        folds.append(Fold(f"loco_{c}", tr, va, test))
    return SplitPlan("loco", folds)


def make_ev_split(labels_dev, n_external: int, val_fraction: float = DEFAULT_VAL_FRACTION,
                  seed: int = 0) -> SplitPlan:
    """Rows ``0..n_dev-1`` are the development set, the following ``n_external`` are the test set."""
    labels_dev = np.asarray(labels_dev, dtype=int)
    n_dev = len(labels_dev)
    tr, va = _train_val(np.arange(n_dev), labels_dev, val_fraction, seed)
    return SplitPlan("ev", [Fold("ev", tr, va, np.arange(n_dev, n_dev + n_external))])


# ---------------------------------------------------------------- configuration


@dataclass
class FusionSettings:
    variants: list[str] = field(default_factory=lambda: list(fu.VARIANTS))
    k_soft: float = 1.0
    k_st: float = 50.0
    max_candidate_size: int | None = None
    ablations: list[str] = field(default_factory=list)  # variants retrained without each modality


@dataclass
class SplitSettings:
    kinds: list[str] = field(default_factory=lambda: ["cv", "loco", "ev"])
    k_folds: int = 10
    val_fraction: float = DEFAULT_VAL_FRACTION
    reuse_cv_selection: bool = True
    external_samples: int = 600
    external_centers: int = 2


@dataclass
class ExperimentConfig:
    generator: SynthConfig = field(default_factory=SynthConfig)
    models: list[str] = field(default_factory=lambda: ["MLP-1", "MLP-2"])
    theta: list[list[int]] | None = None
    training: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    fusion_training: nn.TrainConfig | None = None
    fusion: FusionSettings = field(default_factory=FusionSettings)
    splits: SplitSettings = field(default_factory=SplitSettings)
    seed: int = 0
    jobs: int = 1

    def application_matrix(self) -> ApplicationMatrix:
        mods = self.generator.modality_names
        if self.theta is None:
            return ApplicationMatrix.full(mods, self.models)
        return ApplicationMatrix(mods, tuple(self.models), tuple(tuple(r) for r in self.theta))

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        try:
            gen = SynthConfig(**d.pop("generator", {}))
            tr = nn.TrainConfig(**d.pop("training", {}))
            ftr = d.pop("fusion_training", None)
            ftr = None if ftr is None else nn.TrainConfig(**ftr)
            fus = FusionSettings(**d.pop("fusion", {}))
            spl = SplitSettings(**d.pop("splits", {}))
            cfg = cls(generator=gen, training=tr, fusion_training=ftr, fusion=fus, splits=spl, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        try:
            for v in cfg.fusion.variants + cfg.fusion.ablations:
                fu.parse_variant(v)
            for m in cfg.models:
                MlpSpec(m, 1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for k in cfg.splits.kinds:
            if k not in ("cv", "loco", "ev"):
                raise ConfigError(f"unknown split kind {k!r}")
        return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section")
        node[parts[-1]] = value
    return d


def build_plans(cfg: ExperimentConfig, dev: MultimodalDataset, ext: MultimodalDataset | None = None) -> dict[str, SplitPlan]:
    s = cfg.splits
    plans = {}
    for kind in s.kinds:
        if kind == "cv":
            plans["cv"] = make_cv_splits(dev.labels, s.k_folds, cfg.seed, s.val_fraction)
        elif kind == "loco":
            plans["loco"] = make_loco_splits(dev.centers, dev.labels, s.val_fraction, cfg.seed)
        elif kind == "ev":
            if ext is None:
                raise ConfigError("the ev split needs an external dataset")
            plans["ev"] = make_ev_split(dev.labels, len(ext), s.val_fraction, cfg.seed)
    return plans


def make_data(cfg: ExperimentConfig) -> tuple[MultimodalDataset, MultimodalDataset | None]:
    dev = generate(cfg.generator)
    ext = None
    if "ev" in cfg.splits.kinds:
        ext = generate(replace(cfg.generator, n_centers=cfg.splits.external_centers), external=True,
                       n_samples=cfg.splits.external_samples)
    return dev, ext


# ---------------------------------------------------------------- experiment


def derive_seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def digest_arrays(arrays: Sequence[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


@dataclass
class FoldState:
    """Everything learned on one fold before fusion."""

    kind: str
    fold: Fold
    preprocessors: dict[str, Preprocessor]
    nets: dict[tuple[str, str], nn.DenseNetwork]
    val_predictions: dict[tuple[int, int], PredictionMatrix]
    val_labels: np.ndarray
    inputs: dict[str, np.ndarray]  # preprocessed features for every row
    logs: dict[tuple[str, str], nn.TrainLog] = field(default_factory=dict)

    def digest(self) -> dict[str, str]:
        out = {f"pre:{m}": digest_arrays([p.fill, p.lo, p.hi]) for m, p in sorted(self.preprocessors.items())}
        for (m, a), net in sorted(self.nets.items()):
            out[f"net:{m}/{a}"] = digest_arrays(net.params())
        return out


def fit_fold_unimodal(data: MultimodalDataset, kind: str, fold: Fold, cfg: ExperimentConfig,
                      column_kinds: dict[str, list[str]] | None = None) -> FoldState:
    """Preprocess on training rows and train every active cell of the application matrix."""
    theta = cfg.application_matrix()
    kinds = column_kinds or data.column_kinds
    pres, inputs, nets, preds, logs = {}, {}, {}, {}, {}
    c = max(2, int(data.labels.max()) + 1)
    for mod in theta.modalities:
        ds = data.modalities[mod]
        pres[mod] = Preprocessor.fit(ds, kinds[mod], fold.train)
        inputs[mod] = pres[mod].transform(ds).features
    for cell in theta.active():
        mod, arch = theta.name(cell)
        ds = data.modalities[mod]
        scaled = TabularDataset(ds.feature_names, inputs[mod], data.labels, ds.center_ids, ds.ids)
        tcfg = replace(cfg.training, seed=derive_seed(cfg.seed, kind, fold.name, mod, arch))
        net, tlog = train_unimodal(MlpSpec(arch, ds.n_features, c), scaled, fold.train, fold.val, tcfg)
        nets[(mod, arch)] = net
        logs[(mod, arch)] = tlog
        preds[cell] = predict(net, scaled, cfg.fusion.k_soft, rows=fold.val, model_id=arch,
                              modality_id=mod, fold_id=fold.name)
    return FoldState(kind, fold, pres, nets, preds, data.labels[fold.val], inputs, logs)


def select_from_states(cfg: ExperimentConfig, states: Sequence[FoldState]) -> SelectionResult:
    theta = cfg.application_matrix()
    per_fold = {s.fold.name: s.val_predictions for s in states}
    labels = {s.fold.name: s.val_labels for s in states}
    return optimize(theta, per_fold, labels, cfg.fusion.max_candidate_size)


@dataclass
class MetricRow:
    variant: str
    split: str
    fold: str
    acc: float
    tpr: float
    tnr: float


def run_fold_fusion(data: MultimodalDataset, state: FoldState, gamma: Sequence[tuple[str, str]],
                    cfg: ExperimentConfig) -> tuple[list[MetricRow], dict[str, str], dict[str, fu.FusionModel]]:
    """Evaluate unimodal cells and train/evaluate every configured fusion variant on one fold."""
    fold, kind = state.fold, state.kind
    all_data = fu.FusionData(state.inputs, data.labels)
    train, val, test = all_data.subset(fold.train), all_data.subset(fold.val), all_data.subset(fold.test)
    rows: list[MetricRow] = []
    for (mod, arch), net in sorted(state.nets.items()):
        pred = np.argmax(nn.forward(net, test.inputs[mod]), axis=1)
        m = fu.binary_metrics(test.labels, pred)
        rows.append(MetricRow(f"uni:{mod}/{arch}", kind, fold.name, *m.as_tuple()))
    c = max(2, int(data.labels.max()) + 1)
    fcfg = cfg.fusion_training or cfg.training
    digests: dict[str, str] = {}
    models: dict[str, fu.FusionModel] = {}

    def fit_eval(variant: str, members: Sequence[tuple[str, str]], label: str):
        seed = derive_seed(cfg.seed, kind, fold.name, label)
        model = fu.build_fusion(variant, members, [state.nets[m] for m in members], c,
                                cfg.fusion.k_soft, cfg.fusion.k_st, seed)
        model, _ = fu.fit_variant(model, train, val, replace(fcfg, seed=seed))
        m = fu.evaluate_fusion(model, test)
        rows.append(MetricRow(label, kind, fold.name, *m.as_tuple()))
        digests[label] = digest_arrays(model.params())
        models[label] = model

    gamma = [tuple(g) for g in gamma]
    for variant in cfg.fusion.variants:
        if variant == "jf-m" and len({m for m, _ in gamma}) < 2:
            log.warning("skipping jf-m on fold %s: Gamma* covers a single modality", fold.name)
            continue
        fit_eval(variant, gamma, variant)
    for variant in cfg.fusion.ablations:
        for mod in dict.fromkeys(m for m, _ in gamma):
            rest = [g for g in gamma if g[0] != mod]
            if rest:
                fit_eval(variant, rest, f"{variant}-without-{mod}")
    return rows, digests, models


@dataclass
class ExperimentReport:
    rows: list[MetricRow]
    selections: dict[str, dict]
    digests: dict[str, dict[str, str]]

    def summary(self) -> dict[str, dict[str, dict[str, float]]]:
        return summarize(self.rows)

    def mean(self, variant: str, split: str, metric: str = "acc") -> float:
        return self.summary()[split][variant][f"{metric}_mean"]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def to_json(self) -> dict:
        return {"summary": self.summary(), "selections": self.selections}


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    lines = ["variant,split,fold,acc,tpr,tnr"]
    for r in rows:
        lines.append(",".join([r.variant, r.split, r.fold, repr(float(r.acc)), repr(float(r.tpr)),
                               repr(float(r.tnr))]))
    return "\n".join(lines) + "\n"


def csv_to_rows(text: str) -> list[MetricRow]:
    out = []
    for line in text.strip().splitlines()[1:]:
        v, s, f, a, t, n = line.split(",")
        out.append(MetricRow(v, s, f, float(a), float(t), float(n)))
    return out


def summarize(rows: Sequence[MetricRow]) -> dict[str, dict[str, dict[str, float]]]:
    """Mean and sample std of each metric per split and variant (NaNs skipped)."""
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for r in rows:
        groups.setdefault((r.split, r.variant), []).append(r)
    out: dict[str, dict[str, dict[str, float]]] = {}
    for (split, variant), rs in sorted(groups.items()):
        entry = {"n": len(rs)}
        for metric in ("acc", "tpr", "tnr"):
            vals = np.array([getattr(r, metric) for r in rs], dtype=float)
            vals = vals[~np.isnan(vals)]
            entry[f"{metric}_mean"] = float(np.mean(vals)) if vals.size else math.nan
            entry[f"{metric}_std"] = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
        out.setdefault(split, {})[variant] = entry
    return out


def run_experiment(data: MultimodalDataset, plans: dict[str, SplitPlan], cfg: ExperimentConfig,
                   column_kinds: dict[str, list[str]] | None = None) -> ExperimentReport:
    """Full pipeline: unimodal training per fold, selection, fusion training and test evaluation.

    Gamma* comes from the CV plan's validation predictions and is reused for
    the other plans when ``splits.reuse_cv_selection`` is set (and a CV plan
    exists); otherwise each plan selects from its own validation folds.
    """
    par = Parallel(n_jobs=cfg.jobs)
    order = [k for k in ("cv", "loco", "ev") if k in plans]
    states: dict[str, list[FoldState]] = {}
    for kind in order:
        states[kind] = par(delayed(fit_fold_unimodal)(data, kind, f, cfg, column_kinds)
                           for f in plans[kind].folds)
    selections: dict[str, SelectionResult] = {}
    for kind in order:
        if kind != "cv" and cfg.splits.reuse_cv_selection and "cv" in selections:
            selections[kind] = selections["cv"]
        else:
            selections[kind] = select_from_states(cfg, states[kind])
        log.info("%s: Gamma* = %s", kind, selections[kind].member_names())
    rows: list[MetricRow] = []
    digests: dict[str, dict[str, str]] = {}
    for kind in order:
        gamma = selections[kind].member_names()
        results = par(delayed(run_fold_fusion)(data, s, gamma, cfg) for s in states[kind])
        for s, (r, d, _) in zip(states[kind], results):
            rows.extend(r)
            digests[f"{kind}/{s.fold.name}"] = {**s.digest(), **{f"fusion:{k}": v for k, v in d.items()}}
    return ExperimentReport(rows, {k: v.to_dict() for k, v in selections.items()}, digests)
