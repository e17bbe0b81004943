"""Tabular preprocessing, the MLP architecture zoo and per-cell prediction matrices."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn

MLP_HIDDEN = {
    "MLP-1": (64, 64, 32),
    "MLP-2": (64, 128, 128, 64, 32),
    "MLP-3": (64, 128, 256, 256, 128, 64, 32),
    "MLP-4": (64, 128, 256, 512, 512, 256, 128, 64, 32),
}
RESERVED_COLUMNS = ("id", "label", "center")


class ImputationError(ValueError):
    pass


@dataclass
class TabularDataset:
    feature_names: list[str]
    features: np.ndarray  # (N, d), NaN marks missing
    labels: np.ndarray  # (N,) int
    center_ids: np.ndarray  # (N,)
    ids: list[str] = field(default_factory=list)
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.center_ids = np.asarray(self.center_ids)
        n, d = self.features.shape
        if len(self.feature_names) != d:
            raise ValueError(f"{len(self.feature_names)} names for {d} feature columns")
        if len(self.labels) != n or len(self.center_ids) != n:
            raise ValueError("labels and center_ids must have one entry per row")
        if np.any(self.labels < 0):
            raise ValueError("labels must be non-negative class indices")
        if not self.ids:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ValueError("ids must have one entry per row")
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.features)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "TabularDataset":
        rows = np.asarray(rows)
        return TabularDataset(list(self.feature_names), self.features[rows], self.labels[rows],
                              self.center_ids[rows], [self.ids[i] for i in rows],
                              self.missing_mask[rows])


def _train_rows(ds: TabularDataset, train_rows) -> np.ndarray:
    return np.arange(len(ds)) if train_rows is None else np.asarray(train_rows)


def impute(ds: TabularDataset, column_kinds: Sequence[str],
           train_rows=None) -> tuple[TabularDataset, np.ndarray]:
    """Fill missing cells with the training-row mean (continuous) or mode (categorical).

    Mode ties resolve to the smaller value. Returns the new dataset and the
    per-column fill values.
    """
    if len(column_kinds) != ds.n_features:
        raise ValueError(f"{len(column_kinds)} column kinds for {ds.n_features} columns")
    rows = _train_rows(ds, train_rows)
    fill = np.empty(ds.n_features)
    for j, kind in enumerate(column_kinds):
        col = ds.features[rows, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise ImputationError(f"column {ds.feature_names[j]!r} is entirely missing in the training rows")
        if kind == "continuous":
            fill[j] = col.mean()
        elif kind == "categorical":
            values, counts = np.unique(col, return_counts=True)  # sorted, so argmax picks the lowest
            fill[j] = values[np.argmax(counts)]
        else:
            raise ValueError(f"unknown column kind {kind!r}")
    X = np.where(np.isnan(ds.features), fill, ds.features)
    return replace(ds, features=X, missing_mask=ds.missing_mask.copy()), fill


def minmax_scale(ds: TabularDataset, train_rows=None) -> tuple[TabularDataset, np.ndarray, np.ndarray]:
    """Scale each column to [0, 1] with training-row min/max; held-out rows are clipped.

    Constant columns map to 0.
    """
    if np.any(np.isnan(ds.features)):
        raise ValueError("impute before scaling")
    rows = _train_rows(ds, train_rows)
    lo = ds.features[rows].min(axis=0)
    hi = ds.features[rows].max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    X = np.where(span > 0, (ds.features - lo) / safe, 0.0)
    X = np.clip(X, 0.0, 1.0)
    return replace(ds, features=X, missing_mask=ds.missing_mask.copy()), lo, hi


@dataclass(frozen=True)
class Preprocessor:
    """Fitted imputation and scaling statistics, reusable on new rows."""

    fill: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, ds: TabularDataset, column_kinds: Sequence[str], train_rows=None) -> "Preprocessor":
        imputed, fill = impute(ds, column_kinds, train_rows)
        _, lo, hi = minmax_scale(imputed, train_rows)
        return cls(fill, lo, hi)

    def transform(self, ds: TabularDataset) -> TabularDataset:
        X = np.where(np.isnan(ds.features), self.fill, ds.features)
        span = self.hi - self.lo
        X = np.where(span > 0, (X - self.lo) / np.where(span > 0, span, 1.0), 0.0)
        return replace(ds, features=np.clip(X, 0.0, 1.0), missing_mask=ds.missing_mask.copy())

    def to_dict(self) -> dict:
        return {"fill": self.fill.tolist(), "min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("fill", "min", "max")))


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class MlpSpec:
    name: str
    input_dim: int
    output_dim: int = 2

    def __post_init__(self):
        if self.name not in MLP_HIDDEN:
            raise ValueError(f"unknown MLP {self.name!r}; choose from {sorted(MLP_HIDDEN)}")

    @property
    def hidden_dims(self) -> tuple[int, ...]:
        return MLP_HIDDEN[self.name]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def build(self, seed: int = 0) -> nn.DenseNetwork:
        return nn.init_network(self.dims, seed)


def train_unimodal(spec: MlpSpec, ds: TabularDataset, train_rows, val_rows,
                   cfg: nn.TrainConfig, k: float = 1.0) -> tuple[nn.DenseNetwork, nn.TrainLog]:
    """Build and train one cell of the application matrix on preprocessed data."""
    if spec.input_dim != ds.n_features:
        raise nn.ShapeError(f"{spec.name} expects {spec.input_dim} inputs, data has {ds.n_features}")
    if spec.output_dim <= int(ds.labels.max()):
        raise nn.ShapeError("output_dim smaller than the number of classes present")
    net = spec.build(cfg.seed)
    tr, va = np.asarray(train_rows), np.asarray(val_rows)
    return nn.train(net, (ds.features[tr], ds.labels[tr]), (ds.features[va], ds.labels[va]), cfg, k)


# ---------------------------------------------------------------- predictions


@dataclass
class PredictionMatrix:
    model_id: str
    modality_id: str
    fold_id: str
    instance_ids: list[str]
    scores: np.ndarray  # (N, c)
    crisp_labels: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.instance_ids):
            raise ValueError("scores must be (N, c) with one row per instance id")
        if not np.allclose(self.scores.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError(f"score rows of {self.model_id}/{self.modality_id} do not sum to 1")
        argmax = np.argmax(self.scores, axis=1)
        if self.crisp_labels is None:
            self.crisp_labels = argmax
        self.crisp_labels = np.asarray(self.crisp_labels, dtype=int)
        if not np.array_equal(self.crisp_labels, argmax):
            raise ValueError("crisp labels disagree with the score argmax")

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def key(self) -> tuple[str, str]:
        return (self.modality_id, self.model_id)


def predict(net: nn.DenseNetwork, ds: TabularDataset, k: float = 1.0, *, rows=None,
            model_id: str = "", modality_id: str = "", fold_id: str = "") -> PredictionMatrix:
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    scores = nn.softmax_k(nn.forward(net, ds.features[rows]), k)
    return PredictionMatrix(model_id, modality_id, fold_id, [ds.ids[i] for i in rows], scores)


def write_predictions(pms: Sequence[PredictionMatrix]) -> str:
    """Delimited text: ``id, fold, model, modality, score_0..score_{c-1}, crisp``."""
    if not pms:
        raise ValueError("nothing to write")
    c = pms[0].n_classes
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "fold", "model", "modality", *[f"score_{p}" for p in range(c)], "crisp"])
    for pm in pms:
        if pm.n_classes != c:
            raise ValueError("all prediction matrices must share the class count")
        for iid, row, crisp in zip(pm.instance_ids, pm.scores, pm.crisp_labels):
            w.writerow([iid, pm.fold_id, pm.model_id, pm.modality_id,
                        *[repr(float(v)) for v in row], int(crisp)])
    return buf.getvalue()


def read_predictions(text: str) -> list[PredictionMatrix]:
    """Inverse of :func:`write_predictions`; groups rows by (fold, modality, model)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return []
    score_cols = sorted((c for c in rows[0] if c.startswith("score_")), key=lambda s: int(s[6:]))
    missing = {"id", "fold", "model", "modality", "crisp"} - set(rows[0])
    if missing or not score_cols:
        raise ValueError(f"prediction file lacks columns {sorted(missing) or ['score_*']}")
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["fold"], r["modality"], r["model"]), []).append(r)
    out = []
    for (fold, modality, model), rs in groups.items():
        scores = np.array([[float(r[c]) for c in score_cols] for r in rs])
        out.append(PredictionMatrix(model, modality, fold, [r["id"] for r in rs], scores,
                                    np.array([int(r["crisp"]) for r in rs])))
    return out


# ---------------------------------------------------------------- tabular ingestion


def read_tabular(text: str) -> TabularDataset:
    """Parse a delimited file with reserved ``id``, ``label``, ``center`` columns.

    Every other column is a feature; empty cells are missing.
    """
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    for col in RESERVED_COLUMNS:
        if col not in header:
            raise ValueError(f"tabular file lacks the reserved column {col!r}")
    pos = {c: header.index(c) for c in RESERVED_COLUMNS}
    feat_cols = [i for i, c in enumerate(header) if c not in RESERVED_COLUMNS]
    ids, labels, centers, X = [], [], [], []
    for row in reader:
        if not row:
            continue
        ids.append(row[pos["id"]])
        labels.append(int(row[pos["label"]]))
        centers.append(row[pos["center"]])
        X.append([float(row[i]) if row[i].strip() != "" else math.nan for i in feat_cols])
    X = np.array(X, dtype=float).reshape(len(ids), len(feat_cols))
    return TabularDataset([header[i] for i in feat_cols], X, np.array(labels), np.array(centers), ids)


def write_tabular(ds: TabularDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "center", *ds.feature_names])
    for i in range(len(ds)):
        w.writerow([ds.ids[i], int(ds.labels[i]), ds.center_ids[i],
                    *["" if math.isnan(v) else repr(float(v)) for v in ds.features[i]]])
    return buf.getvalue()
