"""Shared-backbone, multi-head toy model.

Parameters live in a :class:`ParamStore`; every entry is tagged either as
backbone (seen by every task) or as the head of one task. Forward functions
take anything with ``tensor(name)``: the store itself (constants, used for
evaluation) or a :class:`BoundParams` view that turns each parameter into a
tape leaf the first time it is touched, so a task's gradient map only holds
the parameters its forward pass actually used.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ndgrad as nd
from .ndgrad import ShapeMismatch, Tensor

CLS, SEG, DET = "cls", "seg", "det"
TASKS = (CLS, SEG, DET)


class DegenerateFeature(nd.NDGradError, ValueError):
    pass


@dataclass(frozen=True)
class Role:
    task: str | None = None  # None means backbone

    @property
    def is_backbone(self) -> bool:
        return self.task is None

    def __str__(self) -> str:
        return "backbone" if self.task is None else f"head:{self.task}"

    @classmethod
    def parse(cls, text: str) -> "Role":
        if text == "backbone":
            return cls()
        if text.startswith("head:") and len(text) > 5:
            return cls(text[5:])
        raise ValueError(f"bad role {text!r}")


BACKBONE = Role()


def head(task: str) -> Role:
    return Role(task)


class ParamStore:
    """Ordered ``name -> (array, role)`` map holding the model state."""

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._roles: dict[str, Role] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value, role: Role) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._roles[name] = role
        self.grads[name] = np.zeros_like(arr)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def role(self, name: str) -> Role:
        return self._roles[name]

    def items(self):
        return self._values.items()

    def backbone_names(self) -> list[str]:
        return [n for n, r in self._roles.items() if r.is_backbone]

    def head_names(self, task: str) -> list[str]:
        return [n for n, r in self._roles.items() if r.task == task]

    def tasks(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self._roles.values():
            if r.task is not None:
                seen.setdefault(r.task)
        return list(seen)

    @property
    def num_params(self) -> int:
        return int(np.sum([v.size for v in self._values.values()]))

    def validate(self) -> None:
        if not self.backbone_names():
            raise ValueError("a ParamStore needs at least one backbone parameter")

    def tensor(self, name: str) -> Tensor:
        return Tensor(self._values[name])

    def bind(self, tape: nd.Tape) -> "BoundParams":
        return BoundParams(self, tape)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value, self._roles[name])
        return out

    def state_equal(self, other: "ParamStore") -> bool:
        return (
            self.names() == other.names()
            and all(self._roles[n] == other._roles[n] for n in self)
            and all(np.array_equal(self[n], other[n]) for n in self)
        )


class BoundParams:
    def __init__(self, store: ParamStore, tape: nd.Tape) -> None:
        self.store = store
        self.tape = tape

    def tensor(self, name: str) -> Tensor:
        return self.tape.leaf(name, self.store[name])


# ------------------------------------------------------------------- configs


@dataclass
class BackboneConfig:
    input_shape: tuple[int, int, int] = (32, 32, 1)
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 64

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.hidden = tuple(int(v) for v in self.hidden)
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"input_shape must be positive (H, W, C), got {self.input_shape}")
        if any(h <= 0 for h in self.hidden) or self.feature_dim <= 0:
            raise ValueError("backbone widths must be positive")

    @property
    def input_dim(self) -> int:
        h, w, c = self.input_shape
        return h * w * c


@dataclass
class ArcFaceConfig:
    margin: float = 0.4
    scale: float = 16.0
    num_classes: int = 8

    def __post_init__(self) -> None:
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"arcface margin must lie in [0, pi/2), got {self.margin}")
        if self.scale <= 0 or self.num_classes < 2:
            raise ValueError("arcface scale must be positive and num_classes >= 2")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    arcface: ArcFaceConfig = field(default_factory=ArcFaceConfig)
    cls_hidden: int = 64
    seg_classes: int = 3
    smooth_l1_beta: float = 1.0 / 9.0


@dataclass
class TaskOutput:
    task: str
    prediction: Tensor


def init_model(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """He-initialised weights, zero biases."""
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def linear(prefix: str, n_in: int, n_out: int, role: Role, gain: float = 2.0) -> None:
        store.add(f"{prefix}.w", rng.normal(0.0, math.sqrt(gain / n_in), (n_in, n_out)), role)
        store.add(f"{prefix}.b", np.zeros(n_out), role)

    bb = cfg.backbone
    widths = [bb.input_dim, *bb.hidden, bb.feature_dim]
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        linear(f"backbone.fc{i}", a, b, BACKBONE)
    d = bb.feature_dim
    linear("cls.mlp0", d, cfg.cls_hidden, head(CLS))
    linear("cls.mlp1", cfg.cls_hidden, d, head(CLS), gain=0.1)
    store.add("cls.arc.w", rng.normal(0.0, 1.0, (cfg.arcface.num_classes, d)), head(CLS))
    h, w, _ = bb.input_shape
    linear("seg.fc", d, h * w * cfg.seg_classes, head(SEG), gain=1.0)
    linear("det.fc", d, 4, head(DET), gain=1.0)
    return store


# ------------------------------------------------------------------ forwards


def _linear(params, prefix: str, x: Tensor) -> Tensor:
    return nd.add(nd.matmul(x, params.tensor(f"{prefix}.w")), params.tensor(f"{prefix}.b"))


def _layer_prefixes(params, prefix: str) -> list[str]:
    store = getattr(params, "store", params)
    out, i = [], 0
    while f"{prefix}{i}.w" in store:
        out.append(f"{prefix}{i}")
        i += 1
    return out


def backbone_forward(params, x) -> Tensor:
    """Flatten, then (linear -> relu) per backbone layer; returns ``n x D`` features."""
    x = nd.as_tensor(x)
    layers = _layer_prefixes(params, "backbone.fc")
    if not layers:
        raise ShapeMismatch("no backbone layers in parameter store")
    n = x.shape[0]
    h = nd.reshape(x, (n, -1)) if x.data.ndim != 2 else x
    first = params.tensor(f"{layers[0]}.w")
    if h.shape[1] != first.shape[0]:
        raise ShapeMismatch(f"backbone expects {first.shape[0]} input values per sample, got {h.shape[1]}")
    for prefix in layers:
        h = nd.relu(_linear(params, prefix, h))
    return h


def cls_head_forward(params, feat: Tensor) -> Tensor:
    """Residual MLP: ``feat + mlp1(relu(mlp0(feat)))``."""
    feat = nd.as_tensor(feat)
    w0 = params.tensor("cls.mlp0.w")
    if feat.data.ndim != 2 or feat.shape[1] != w0.shape[0]:
        raise ShapeMismatch(f"cls head expects n x {w0.shape[0]} features, got {feat.shape}")
    return nd.add(feat, cls_mlp(params, feat))


def cls_mlp(params, feat: Tensor) -> Tensor:
    return _linear(params, "cls.mlp1", nd.relu(_linear(params, "cls.mlp0", feat)))


# sqrt(1 - cos^2) has an infinite slope at cos = +-1; the floor keeps it
# finite while biasing the margin logit by under 1e-6.
_SIN_FLOOR = 1e-12


def arcface_logits(feat, class_weights, target, cfg: ArcFaceConfig) -> Tensor:
    feat, class_weights = nd.as_tensor(feat), nd.as_tensor(class_weights)
    if feat.data.ndim != 2 or class_weights.data.ndim != 2 or feat.shape[1] != class_weights.shape[1]:
        raise ShapeMismatch(f"arcface feat {feat.shape} vs class weights {class_weights.shape}")
    for label, arr in (("feature", feat.data), ("class-weight", class_weights.data)):
        if arr.shape[0] and np.sqrt((arr * arr).sum(axis=1)).min() < 1e-12:
            raise DegenerateFeature(f"a {label} row has (near-)zero norm")
    n, c = feat.shape[0], class_weights.shape[0]
    target = np.asarray(target)
    mask = target.astype(np.float64) if target.ndim == 2 else nd.one_hot(target, c)
    if mask.shape != (n, c):
        raise ShapeMismatch(f"target {target.shape} does not match {n} x {c} logits")
    cos = nd.matmul(nd.l2_normalize(feat), nd.transpose(nd.l2_normalize(class_weights)))
    cos = nd.clamp(cos, -1.0, 1.0)
    sin = nd.sqrt(nd.add(np.full((n, c), 1.0 + _SIN_FLOOR), nd.scale(nd.mul(cos, cos), -1.0)))
    cos_m = nd.add(nd.scale(cos, math.cos(cfg.margin)), nd.scale(sin, -math.sin(cfg.margin)))
    # cos + mask * (cos(theta + m) - cos): margin only on the target entries
    logits = nd.add(cos, nd.mul(nd.add(cos_m, nd.scale(cos, -1.0)), mask))
    return nd.scale(logits, cfg.scale)


def arcface_loss(feat, class_weights, target, cfg: ArcFaceConfig) -> Tensor:
    return nd.softmax_cross_entropy(arcface_logits(feat, class_weights, target, cfg), target)


def cosine_logits(feat, class_weights) -> np.ndarray:
    f = np.asarray(feat, dtype=np.float64)
    w = np.asarray(class_weights, dtype=np.float64)
    f = f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)
    w = w / np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)
    return f @ w.T


def seg_head_forward(params, feat: Tensor, image_hw: tuple[int, int]) -> Tensor:
    feat = nd.as_tensor(feat)
    w = params.tensor("seg.fc.w")
    h, wd = image_hw
    if feat.data.ndim != 2 or feat.shape[1] != w.shape[0] or w.shape[1] % (h * wd):
        raise ShapeMismatch(f"seg head cannot map {feat.shape} onto {h}x{wd} pixels")
    k = w.shape[1] // (h * wd)
    return nd.reshape(_linear(params, "seg.fc", feat), (feat.shape[0], h, wd, k))


def seg_loss(logits: Tensor, mask) -> Tensor:
    """Per-pixel softmax cross-entropy averaged over pixels and batch."""
    n, h, w, k = logits.shape
    mask = np.asarray(mask)
    if mask.shape != (n, h, w):
        raise ShapeMismatch(f"mask {mask.shape} vs logits {logits.shape}")
    return nd.softmax_cross_entropy(nd.reshape(logits, (n * h * w, k)), mask.reshape(-1))


def det_head_forward(params, feat: Tensor) -> Tensor:
    """Box ``(cx, cy, w, h)`` in normalised coordinates, squashed by a sigmoid."""
    feat = nd.as_tensor(feat)
    w = params.tensor("det.fc.w")
    if feat.data.ndim != 2 or feat.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"det head expects n x {w.shape[0]} features, got {feat.shape}")
    return nd.sigmoid(_linear(params, "det.fc", feat))


def det_loss(boxes: Tensor, target, beta: float = 1.0) -> Tensor:
    return nd.smooth_l1(boxes, np.asarray(target, dtype=np.float64), beta)


# --------------------------------------------------------------------- tasks


@dataclass
class ClsTask:
    cfg: ModelConfig
    loss_scale: float = 1.0
    name: str = CLS

    def forward(self, params, x) -> TaskOutput:
        feat = cls_head_forward(params, backbone_forward(params, x))
        return TaskOutput(self.name, feat)

    def loss(self, params, x, y) -> Tensor:
        feat = self.forward(params, x).prediction
        raw = arcface_loss(feat, params.tensor("cls.arc.w"), y, self.cfg.arcface)
        return nd.scale(raw, self.loss_scale)

    def predict(self, params, x) -> np.ndarray:
        feat = self.forward(params, x).prediction.data
        return cosine_logits(feat, params.tensor("cls.arc.w").data).argmax(axis=1)


@dataclass
class SegTask:
    cfg: ModelConfig
    loss_scale: float = 1.0
    name: str = SEG

    def forward(self, params, x) -> TaskOutput:
        hw = self.cfg.backbone.input_shape[:2]
        return TaskOutput(self.name, seg_head_forward(params, backbone_forward(params, x), hw))

    def loss(self, params, x, y) -> Tensor:
        return nd.scale(seg_loss(self.forward(params, x).prediction, y), self.loss_scale)

    def predict(self, params, x) -> np.ndarray:
        return self.forward(params, x).prediction.data.argmax(axis=-1)


@dataclass
class DetTask:
    cfg: ModelConfig
    loss_scale: float = 1.0
    name: str = DET

    def forward(self, params, x) -> TaskOutput:
        return TaskOutput(self.name, det_head_forward(params, backbone_forward(params, x)))

    def loss(self, params, x, y) -> Tensor:
        boxes = self.forward(params, x).prediction
        return nd.scale(det_loss(boxes, y, self.cfg.smooth_l1_beta), self.loss_scale)

    def predict(self, params, x) -> np.ndarray:
        return self.forward(params, x).prediction.data


def make_tasks(cfg: ModelConfig, loss_scales: dict[str, float] | None = None) -> dict:
    scales = {CLS: 1.0, SEG: 1.0, DET: 1.0, **(loss_scales or {})}
    return {
        CLS: ClsTask(cfg, scales[CLS]),
        SEG: SegTask(cfg, scales[SEG]),
        DET: DetTask(cfg, scales[DET]),
    }


# ---------------------------------------------------------------- checkpoint

_MAGIC = b"TBGCCKPT"
_VERSION = 1


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(store: ParamStore) -> bytes:
    """Little-endian binary record; identical parameters give identical bytes.

    Layout: magic, u32 version, u32 count, then per parameter: name, role
    (u32-length-prefixed UTF-8), u32 ndim, u64 extents, float64 values.
    """
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(store))]
    for name in store:
        arr = np.ascontiguousarray(store[name], dtype="<f8")
        parts.append(_pack_str(name))
        parts.append(_pack_str(str(store.role(name))))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(store))
    return path


def load_checkpoint(path) -> ParamStore:
    buf = Path(path).read_bytes()
    if not buf.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(_MAGIC)

    def take(fmt: str):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    def take_str() -> str:
        nonlocal pos
        (n,) = take("<I")
        text = buf[pos:pos + n].decode("utf-8")
        pos += n
        return text

    version, count = take("<II")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    store = ParamStore()
    for _ in range(count):
        name, role = take_str(), Role.parse(take_str())
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        store.add(name, arr, role)
    return store


# ----------------------------------------------------------------- gradcheck


@dataclass
class GradcheckResult:
    case: str
    instances: int
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


class LeafView:
    """Parameter access over a ``{name: Tensor}`` dict, shaped like a bound store."""

    def __init__(self, tensors: dict[str, Tensor], store: ParamStore) -> None:
        self.tensors = tensors
        self.store = store

    def tensor(self, name: str) -> Tensor:
        return self.tensors[name]


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-9) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both are below ``floor``."""
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale_ < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale_)


def check_gradients(build, values: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    ``build`` maps ``{name: Tensor}`` to a scalar loss tensor.
    """
    tape = nd.Tape()
    leaves = {k: tape.leaf(k, v) for k, v in values.items()}
    grads = nd.backward(build(leaves), tape)
    worst = 0.0
    for name in values:
        def f(x, name=name):
            consts = {k: Tensor(x if k == name else v) for k, v in values.items()}
            return build(consts).item()

        worst = max(worst, rel_err(grads[name], nd.finite_diff_grad(f, values[name], h)))
    return worst


def _kink_free(build, values, margin: float) -> bool:
    with nd.relu_margin as m:
        build({k: Tensor(v) for k, v in values.items()})
    return m.value > margin


def _loss_cases(rng: np.random.Generator):
    """Yields ``(case, build, values)``; every draw is uniform in [-1, 1]."""
    u = lambda *shape: rng.uniform(-1.0, 1.0, shape)  # noqa: E731
    n, c = 4, 5
    target = rng.integers(0, c, n)
    yield "softmax_ce", lambda p: nd.softmax_cross_entropy(p["logits"], target), {"logits": u(n, c)}

    k, hw = 3, (3, 2)
    mask = rng.integers(0, k, (n, *hw))
    yield "pixel_ce", lambda p: seg_loss(nd.reshape(p["logits"], (n, *hw, k)), mask), {
        "logits": u(n, hw[0] * hw[1] * k)
    }

    box = rng.uniform(0.0, 1.0, (n, 4))
    yield "smooth_l1", lambda p: det_loss(p["pred"], box), {"pred": u(n, 4) * 2.0}

    arc = ArcFaceConfig(margin=0.4, scale=4.0, num_classes=3)
    y = rng.integers(0, 3, n)
    yield "arcface", lambda p: arcface_loss(p["feat"], p["w"], y, arc), {"feat": u(n, 6), "w": u(3, 6)}


def _model_cases(rng: np.random.Generator):
    cfg = ModelConfig(
        backbone=BackboneConfig(input_shape=(3, 3, 1), hidden=(5,), feature_dim=4),
        arcface=ArcFaceConfig(margin=0.4, scale=4.0, num_classes=3),
        cls_hidden=4,
        seg_classes=3,
    )
    store = init_model(cfg, seed=int(rng.integers(1 << 31)))
    values = {name: rng.uniform(-1.0, 1.0, store[name].shape) for name in store}
    n = 3
    x = rng.uniform(-1.0, 1.0, (n, 3, 3, 1))
    labels = {
        CLS: rng.integers(0, 3, n),
        SEG: rng.integers(0, 3, (n, 3, 3)),
        DET: rng.uniform(0.0, 1.0, (n, 4)),
    }
    for name, task in make_tasks(cfg).items():
        used = [p for p in values if store.role(p).is_backbone or store.role(p).task == name]
        sub = {p: values[p] for p in used}

        yield f"task_{name}", (lambda p, task=task, y=labels[name]: task.loss(LeafView(p, store), x, y)), sub


def gradcheck(instances: int = 50, model_instances: int = 10, seed: int = 0,
              tol: float = 1e-4, h: float = 1e-5, margin: float = 1e-3) -> list[GradcheckResult]:
    """Finite-difference check of every loss and of full task losses.

    Instances whose relu inputs come within ``margin`` of the kink are
    redrawn, since central differences are invalid across it.
    """
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}

    def run(cases_fn, wanted: int) -> None:
        done: dict[str, int] = {}
        while min(done.values(), default=0) < wanted or not done:
            for case, build, values in cases_fn(rng):
                if done.get(case, 0) >= wanted:
                    continue
                if not _kink_free(build, values, margin):
                    continue
                err = check_gradients(build, values, h)
                worst[case] = max(worst.get(case, 0.0), err)
                done[case] = done.get(case, 0) + 1
            counts.update(done)

    run(_loss_cases, instances)
    if model_instances:
        run(_model_cases, model_instances)
    return [GradcheckResult(c, counts[c], worst[c], tol) for c in worst]
