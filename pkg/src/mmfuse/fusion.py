"""Joint-late fusion of classifier outputs, its frozen late-fusion twin and
feature-level competitors (concatenation and Kronecker product).

Members are referenced by ``(modality, model)`` name pairs; inputs are a
mapping from modality name to its (N, d) feature matrix.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .selection import vote

Member = tuple[str, str]

HEADS = ("head1_linear", "head2_hidden4")
HEAD2_WIDTH = 4
VARIANTS = ("jlf-s-1", "jlf-s-2", "jlf-c-1", "jlf-c-2", "lf-mv", "lf-s-1", "lf-s-2",
            "lf-c-1", "lf-c-2", "jf-c", "jf-m")
POSITIVE_CLASS = 1


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionSpec:
    mode: str  # "soft" | "crisp"
    head: str  # one of HEADS
    members: tuple[Member, ...]
    c: int = 2
    k_soft: float = 1.0
    k_st: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(tuple(m) for m in self.members))
        if self.mode not in ("soft", "crisp"):
            raise FusionError(f"unknown mode {self.mode!r}")
        if self.head not in HEADS:
            raise FusionError(f"unknown head {self.head!r}")
        if not self.members:
            raise FusionError("a fusion needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise FusionError("members must be unique")
        if self.c < 2 or not (self.k_soft > 0 and self.k_st > 0):
            raise FusionError("need c >= 2 and positive k values")

    @property
    def shared_dim(self) -> int:
        return self.c * len(self.members)


@dataclass(frozen=True)
class Variant:
    name: str
    kind: str  # "jlf" | "lf" | "mv" | "jf-c" | "jf-m"
    mode: str = "soft"
    head: str = "head1_linear"


def parse_variant(name: str) -> Variant:
    name = name.lower()
    if name not in VARIANTS:
        raise FusionError(f"unknown fusion variant {name!r}; choose from {', '.join(VARIANTS)}")
    if name == "lf-mv":
        return Variant(name, "mv")
    if name in ("jf-c", "jf-m"):
        return Variant(name, name)
    kind, m, h = name.split("-")
    return Variant(name, kind, "soft" if m == "s" else "crisp", HEADS[int(h) - 1])


@dataclass
class FusionModel:
    member_nets: list[nn.DenseNetwork]
    spec: FusionSpec
    head_net: nn.DenseNetwork | None
    frozen_members: bool = False
    kind: str = "jlf"
    encoding_layers: tuple[int, ...] = ()
    trained: bool = False

    def __post_init__(self):
        if len(self.member_nets) != len(self.spec.members):
            raise FusionError("one network per member required")
        if self.kind in ("jf-c", "jf-m") and len(self.encoding_layers) != len(self.member_nets):
            self.encoding_layers = tuple(len(n.layers) - 2 for n in self.member_nets)

    @property
    def modalities(self) -> list[str]:
        return [m for m, _ in self.spec.members]

    def copy(self) -> "FusionModel":
        return replace(self, member_nets=[n.copy() for n in self.member_nets],
                       head_net=None if self.head_net is None else self.head_net.copy())

    def params(self, members: bool = True, head: bool = True) -> list[np.ndarray]:
        out = []
        if members:
            for net in self.member_nets:
                out.extend(net.params())
        if head and self.head_net is not None:
            out.extend(self.head_net.params())
        return out


@dataclass
class FusionData:
    inputs: dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        for m, X in self.inputs.items():
            if len(X) != len(self.labels):
                raise FusionError(f"modality {m!r} has {len(X)} rows for {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, rows) -> "FusionData":
        return FusionData({m: X[rows] for m, X in self.inputs.items()}, self.labels[rows])


# ---------------------------------------------------------------- shared representation


def shared_representation(member_logits: Sequence[np.ndarray], spec: FusionSpec) -> np.ndarray:
    """Concatenate per-member classification vectors (softmax_k or one-hot)."""
    if len(member_logits) != len(spec.members):
        raise FusionError(f"got {len(member_logits)} member outputs for {len(spec.members)} members")
    blocks = []
    for z in member_logits:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != spec.c:
            raise FusionError(f"member logits have {z.shape[-1]} entries, expected {spec.c}")
        blocks.append(nn.softmax_k(z, spec.k_soft) if spec.mode == "soft" else nn.crispify(z))
    return np.concatenate(blocks, axis=-1)


def build_head(spec: FusionSpec, seed: int = 0, in_dim: int | None = None) -> nn.DenseNetwork:
    """head1: shared -> c; head2: shared -> 4 (relu) -> c."""
    d = spec.shared_dim if in_dim is None else in_dim
    dims = [d, spec.c] if spec.head == "head1_linear" else [d, HEAD2_WIDTH, spec.c]
    return nn.init_network(dims, seed)


def jf_concat(member_encodings: Sequence[np.ndarray], head: nn.DenseNetwork) -> np.ndarray:
    fused = np.concatenate([np.asarray(e, dtype=float) for e in member_encodings], axis=-1)
    if fused.shape[-1] != head.input_dim:
        raise nn.ShapeError(f"concatenated encodings have {fused.shape[-1]} entries, head expects {head.input_dim}")
    return nn.forward(head, fused)


def _kron_tensor(us: Sequence[np.ndarray]) -> np.ndarray:
    letters = string.ascii_lowercase[: len(us)]
    spec = ",".join(f"Z{a}" for a in letters) + "->Z" + letters
    return np.einsum(spec.replace("Z", "z"), *us)


def jf_kron(member_encodings: Sequence[np.ndarray]) -> np.ndarray:
    """Left-folded Kronecker product of each encoding with a trailing 1 appended."""
    if len(member_encodings) < 2:
        raise FusionError("the outer-product fusion needs at least two encodings")
    encs = [np.asarray(e, dtype=float) for e in member_encodings]
    vec = encs[0].ndim == 1
    us = [np.concatenate([e.reshape(1, -1) if vec else e, np.ones((1 if vec else len(e), 1))], axis=1)
          for e in encs]
    T = _kron_tensor(us)
    out = T.reshape(len(T), -1)
    return out[0] if vec else out


def _kron_vjp(us: Sequence[np.ndarray], grad: np.ndarray) -> list[np.ndarray]:
    G = grad.reshape((len(grad),) + tuple(u.shape[1] for u in us))
    letters = string.ascii_lowercase[: len(us)]
    out = []
    for i in range(len(us)):
        others = [j for j in range(len(us)) if j != i]
        spec = "z" + letters + "," + ",".join("z" + letters[j] for j in others) + "->z" + letters[i]
        out.append(np.einsum(spec, G, *[us[j] for j in others]))
    return out


# ---------------------------------------------------------------- forward / backward


def _member_inputs(model: FusionModel, inputs: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    try:
        return [np.asarray(inputs[m], dtype=float) for m in model.modalities]
    except KeyError as exc:
        raise FusionError(f"no input for modality {exc.args[0]!r}") from None


def _modality_groups(model: FusionModel) -> list[list[int]]:
    order: dict[str, list[int]] = {}
    for j, m in enumerate(model.modalities):
        order.setdefault(m, []).append(j)
    return list(order.values())


def fused_input(model: FusionModel, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Input to the head: shared classification vector (JLF/LF) or fused encodings (JF)."""
    xs = _member_inputs(model, inputs)
    if model.kind in ("jlf", "lf"):
        return shared_representation([nn.forward(n, x) for n, x in zip(model.member_nets, xs)], model.spec)
    encs = [nn.forward_hidden(n, x, li) for n, x, li in zip(model.member_nets, xs, model.encoding_layers)]
    if model.kind == "jf-c":
        return np.concatenate(encs, axis=1)
    return jf_kron([np.concatenate([encs[j] for j in g], axis=1) for g in _modality_groups(model)])


def fusion_forward(model: FusionModel, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    if model.kind == "mv":
        raise FusionError("majority-vote fusion has no logits; use predict_labels")
    return nn.forward(model.head_net, fused_input(model, inputs))


def fusion_loss_and_grads(model: FusionModel, inputs: Mapping[str, np.ndarray], labels,
                          members: bool = True, head: bool = True) -> tuple[float, list[np.ndarray]]:
    """Mean head cross-entropy and gradients aligned with ``model.params(members, head)``.

    Crisp mode uses a straight-through estimator: hard one-hot forward,
    softmax_{k_st} Jacobian backward.
    """
    labels = np.asarray(labels, dtype=int)
    xs = _member_inputs(model, inputs)
    n = len(labels)
    caches = []
    if model.kind in ("jlf", "lf"):
        blocks, soft = [], []
        for net, x in zip(model.member_nets, xs):
            acts = nn.forward_cache(net, x)
            caches.append(acts)
            z = acts[-1]
            if model.spec.mode == "soft":
                y = nn.softmax_k(z, model.spec.k_soft)
                soft.append(y)
                blocks.append(y)
            else:
                soft.append(nn.softmax_k(z, model.spec.k_st))
                blocks.append(nn.crispify(z))
        fused = np.concatenate(blocks, axis=1)
    else:
        encs = []
        for net, x, li in zip(model.member_nets, xs, model.encoding_layers):
            acts = nn.forward_cache(net, x)[: li + 2]
            caches.append(acts)
            encs.append(acts[-1])
        if model.kind == "jf-c":
            fused = np.concatenate(encs, axis=1)
        else:
            groups = _modality_groups(model)
            us = [np.concatenate([np.concatenate([encs[j] for j in g], axis=1), np.ones((n, 1))], axis=1)
                  for g in groups]
            fused = _kron_tensor(us).reshape(n, -1)

    hacts = nn.forward_cache(model.head_net, fused)
    y = nn.softmax_k(hacts[-1], 1.0)
    loss = float(np.mean(nn.cross_entropy(y, labels)))
    onehot = np.zeros_like(y)
    onehot[np.arange(n), labels] = 1.0
    hgrads, g_fused = nn.backprop(model.head_net, hacts, (y - onehot) / n, need_input_grad=members)

    grads: list[np.ndarray] = []
    if members:
        if model.kind in ("jlf", "lf"):
            c = model.spec.c
            k = model.spec.k_soft if model.spec.mode == "soft" else model.spec.k_st
            for j, (net, acts) in enumerate(zip(model.member_nets, caches)):
                gz = nn.softmax_k_vjp(soft[j], g_fused[:, j * c:(j + 1) * c], k)
                grads.extend(nn.backprop(net, acts, gz)[0])
        else:
            if model.kind == "jf-c":
                sizes = np.cumsum([e.shape[1] for e in encs])[:-1]
                g_encs = np.split(g_fused, sizes, axis=1)
            else:
                g_us = _kron_vjp(us, g_fused)
                g_encs = [None] * len(encs)
                for g, gu in zip(groups, g_us):
                    sizes = np.cumsum([encs[j].shape[1] for j in g])[:-1]
                    for j, part in zip(g, np.split(gu[:, :-1], sizes, axis=1)):
                        g_encs[j] = part
            for net, acts, li, ge in zip(model.member_nets, caches, model.encoding_layers, g_encs):
                used, _ = nn.backprop_layers(net.layers[: li + 1], acts, ge)
                unused = [np.zeros_like(p) for p in net.params()[len(used):]]
                grads.extend(used + unused)
    if head:
        grads.extend(hgrads)
    return loss, grads


def predict_labels(model: FusionModel, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    if model.kind == "mv":
        xs = _member_inputs(model, inputs)
        logits = [nn.forward(n, x) for n, x in zip(model.member_nets, xs)]
        soft = np.stack([nn.softmax_k(z, model.spec.k_soft) for z in logits])
        crisp = np.stack([np.argmax(z, axis=1) for z in logits])
        return vote(crisp, soft, model.spec.c)
    return np.argmax(fusion_forward(model, inputs), axis=1)


# ---------------------------------------------------------------- construction and training


def build_fusion(variant: str | Variant, members: Sequence[Member], member_nets: Sequence[nn.DenseNetwork],
                 c: int = 2, k_soft: float = 1.0, k_st: float = 50.0, seed: int = 0,
                 encoding_layers: Sequence[int] | None = None) -> FusionModel:
    """Assemble an untrained fusion model; member networks are copied."""
    v = parse_variant(variant) if isinstance(variant, str) else variant
    spec = FusionSpec(v.mode, v.head, tuple(members), c, k_soft, k_st)
    nets = [n.copy() for n in member_nets]
    if v.kind == "mv":
        return FusionModel(nets, spec, None, frozen_members=True, kind="mv", trained=True)
    if v.kind in ("jlf", "lf"):
        return FusionModel(nets, spec, build_head(spec, seed), frozen_members=(v.kind == "lf"), kind=v.kind)
    layers = tuple(encoding_layers) if encoding_layers else tuple(len(n.layers) - 2 for n in nets)
    dims = [nets[j].layers[li].out_dim for j, li in enumerate(layers)]
    model = FusionModel(nets, spec, None, kind=v.kind, encoding_layers=layers)
    if v.kind == "jf-c":
        in_dim = sum(dims)
    else:
        groups = _modality_groups(model)
        if len(groups) < 2:
            raise FusionError("the outer-product fusion needs members from at least two modalities")
        in_dim = math.prod(sum(dims[j] for j in g) + 1 for g in groups)
    model.head_net = build_head(replace(spec, head="head1_linear"), seed, in_dim)
    return model


def train_fusion(model: FusionModel, train: FusionData, val: FusionData, cfg: nn.TrainConfig,
                 members: bool = True, head: bool = True) -> tuple[FusionModel, nn.TrainLog]:
    """End-to-end training of a copy of ``model`` with the shared schedule and early stopping."""
    if model.kind == "mv":
        return model, nn.TrainLog()
    model = model.copy()
    params = model.params(members, head)

    def batch(idx):
        return fusion_loss_and_grads(model, {m: X[idx] for m, X in train.inputs.items()},
                                     train.labels[idx], members, head)

    def val_loss():
        y = nn.softmax_k(fusion_forward(model, val.inputs), 1.0)
        return float(np.mean(nn.cross_entropy(y, val.labels)))

    tlog = nn.fit(params, batch, val_loss, len(train), cfg)
    model.trained = True
    return model, tlog


def train_jlf(model: FusionModel, train: FusionData, val: FusionData, cfg: nn.TrainConfig,
              warm_start_head: bool = True) -> tuple[FusionModel, nn.TrainLog]:
    """Joint training: gradients flow through the shared vector into every member.

    With ``warm_start_head`` the head is first fitted on the frozen members'
    outputs, so joint training starts from a head that already agrees with
    the pretrained members instead of a random one.
    """
    if model.frozen_members:
        raise FusionError("train_jlf needs unfrozen members")
    if warm_start_head:
        model = model.copy()
        if model.kind in ("jlf", "lf"):
            warm, _ = train_lf_frozen(model, train, val, cfg)
            model.head_net = warm.head_net
        else:
            model, _ = train_fusion(model, train, val, cfg, members=False, head=True)
    return train_fusion(model, train, val, cfg, members=True, head=True)


def train_lf_frozen(model: FusionModel, train: FusionData, val: FusionData,
                    cfg: nn.TrainConfig) -> tuple[FusionModel, nn.TrainLog]:
    """Train only the head on the frozen members' shared vectors."""
    model = model.copy()
    model.frozen_members = True
    S, Sv = fused_input(model, train.inputs), fused_input(model, val.inputs)
    model.head_net, tlog = nn.train(model.head_net, (S, train.labels), (Sv, val.labels), cfg, 1.0)
    model.trained = True
    return model, tlog


def fit_variant(model: FusionModel, train: FusionData, val: FusionData,
                cfg: nn.TrainConfig) -> tuple[FusionModel, nn.TrainLog]:
    if model.kind == "mv":
        return model, nn.TrainLog()
    if model.kind == "lf":
        return train_lf_frozen(model, train, val, cfg)
    return train_jlf(model, train, val, cfg)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class Metrics:
    acc: float
    tpr: float
    tnr: float

    def as_tuple(self) -> tuple[float, float, float]:
        return self.acc, self.tpr, self.tnr


def binary_metrics(y_true, y_pred, positive: int = POSITIVE_CLASS) -> Metrics:
    """Accuracy, sensitivity and specificity; NaN where a denominator is zero."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise FusionError("cannot evaluate on an empty test set")
    pos, neg = y_true == positive, y_true != positive
    tp = int(np.sum(pos & (y_pred == positive)))
    tn = int(np.sum(neg & (y_pred != positive)))
    acc = float(np.mean(y_true == y_pred))
    tpr = tp / int(pos.sum()) if pos.any() else math.nan
    tnr = tn / int(neg.sum()) if neg.any() else math.nan
    return Metrics(acc, tpr, tnr)


def evaluate_fusion(model: FusionModel, test: FusionData) -> Metrics:
    return binary_metrics(test.labels, predict_labels(model, test.inputs))


# ---------------------------------------------------------------- serialization


def dumps_fusion(model: FusionModel) -> str:
    manifest = {
        "kind": model.kind, "mode": model.spec.mode, "head": model.spec.head,
        "members": [list(m) for m in model.spec.members], "c": model.spec.c,
        "k_soft": model.spec.k_soft, "k_st": model.spec.k_st,
        "frozen_members": model.frozen_members, "encoding_layers": list(model.encoding_layers),
        "trained": model.trained,
    }
    lines = [nn.MAGIC, "manifest " + json.dumps(manifest, sort_keys=True)]
    for (mod, arch), net in zip(model.spec.members, model.member_nets):
        lines += nn.network_block(net, f"member {mod}/{arch}")
    if model.head_net is not None:
        lines += nn.network_block(model.head_net, "head")
    return "\n".join(lines) + "\n"


def loads_fusion(text: str) -> FusionModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != nn.MAGIC or not lines[1].startswith("manifest "):
        raise ValueError("not a fusion model document")
    man = json.loads(lines[1][len("manifest "):])
    nets: dict[str, nn.DenseNetwork] = {}
    pos = 2
    while pos < len(lines) and lines[pos].strip():
        name, net, pos = nn.parse_network_block(lines, pos)
        nets[name] = net
    spec = FusionSpec(man["mode"], man["head"], tuple(tuple(m) for m in man["members"]),
                      man["c"], man["k_soft"], man["k_st"])
    members = [nets[f"member {m}/{a}"] for m, a in spec.members]
    return FusionModel(members, spec, nets.get("head"), man["frozen_members"], man["kind"],
                       tuple(man["encoding_layers"]), man["trained"])
