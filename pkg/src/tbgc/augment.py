"""Multi-branch data augmentation.

A :class:`MultiBranchPipeline` holds several :class:`AugBranch` es; every
sample passes through exactly one branch, drawn with per-epoch probabilities
that drift linearly from a start to an end distribution (a curriculum).
A branch may hold at most one *strong* op (mosaic, mixup, policy stand-in),
so strong augmentations never stack. :class:`ParallelPipeline` is the
baseline that runs every op on every sample.

Boxes are ``(cx, cy, w, h)`` in normalised image coordinates. Flips and
rotations reflect coordinates on the image's eighth-pixel grid, so for boxes
on that grid (everything the synthetic generators emit, and their mosaics)
they are bit-exact involutions at any image size.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .kernels import resize_nearest
from .ndgrad import ShapeMismatch


class AugmentError(ValueError):
    pass


class BranchConflict(AugmentError):
    pass


class InsufficientSamples(AugmentError):
    pass


class CropLargerThanImage(AugmentError):
    pass


class SampleRejected(AugmentError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # H x W x C
    label: Any = None  # class index, or a soft distribution after mixup
    mask: np.ndarray | None = None  # H x W class indices
    box: np.ndarray | None = None  # (cx, cy, w, h)

    def validate(self) -> "Sample":
        if self.image.ndim != 3:
            raise ShapeMismatch(f"image must be H x W x C, got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ShapeMismatch(f"mask {self.mask.shape} vs image {self.image.shape}")
        if self.box is not None:
            b = np.asarray(self.box)
            if b.shape != (4,) or not np.all((b >= 0) & (b <= 1)) or b[2] <= 0 or b[3] <= 0:
                raise SampleRejected(f"invalid box {b.tolist()}")
        return self

    def copy(self) -> "Sample":
        return Sample(
            self.image.copy(),
            self.label.copy() if isinstance(self.label, np.ndarray) else self.label,
            None if self.mask is None else self.mask.copy(),
            None if self.box is None else np.array(self.box, dtype=np.float64),
        )

    def equals(self, other: "Sample") -> bool:
        """Bit-exact equality of every field."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(np.asarray(a), np.asarray(b)) and np.asarray(a).dtype == np.asarray(b).dtype
        return (
            same(self.image, other.image) and same(self.label, other.label)
            and same(self.mask, other.mask) and same(self.box, other.box)
        )


# ------------------------------------------------------------------- ops


def _reflect(c: float, n: int) -> float:
    """``1 - c`` for a coordinate on an ``n``-pixel axis.

    Coordinates lying exactly on the eighth-pixel grid are reflected as
    ``(g - k) / g``, so reflecting twice returns the input bit for bit at
    any image size; other coordinates use plain ``1 - c``.
    """
    g = 8 * n
    k = round(c * g)
    if k / g == c:
        return (g - k) / g
    return 1.0 - c


def hflip(s: Sample) -> Sample:
    box = None
    if s.box is not None:
        box = np.array(s.box, dtype=np.float64)
        box[0] = _reflect(float(box[0]), s.image.shape[1])
    return Sample(
        s.image[:, ::-1].copy(),
        s.label,
        None if s.mask is None else s.mask[:, ::-1].copy(),
        box,
    )


def _rot90_box(box: np.ndarray, width: int) -> np.ndarray:
    # counter-clockwise quarter turn, matching np.rot90
    cx, cy, w, h = box
    return np.array([cy, _reflect(float(cx), width), h, w], dtype=np.float64)


def rotate90(s: Sample, k: int = 1) -> Sample:
    """Rotate by ``k`` counter-clockwise quarter turns."""
    k %= 4
    if k == 0:
        return s.copy()
    box = None if s.box is None else np.array(s.box, dtype=np.float64)
    if box is not None:
        h, w = s.image.shape[:2]
        for _ in range(k):
            box = _rot90_box(box, w)
            h, w = w, h
    return Sample(
        np.rot90(s.image, k, axes=(0, 1)).copy(),
        s.label,
        None if s.mask is None else np.rot90(s.mask, k).copy(),
        box,
    )


def rotate(s: Sample, angles: Sequence[int], rng: np.random.Generator) -> Sample:
    """Rotate by an angle drawn from ``angles`` (multiples of 90 degrees)."""
    angles = [int(a) for a in angles]
    if not angles or any(a % 90 for a in angles):
        raise AugmentError(f"rotation angles must be multiples of 90, got {angles}")
    return rotate90(s, angles[int(rng.integers(len(angles)))] // 90)


def add_noise(s: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    if sigma < 0:
        raise AugmentError(f"noise sigma must be >= 0, got {sigma}")
    out = s.copy()
    if sigma > 0:
        out.image = out.image + rng.normal(0.0, sigma, out.image.shape)
    return out


def contrast(s: Sample, factor: float) -> Sample:
    out = s.copy()
    m = out.image.mean()
    out.image = (out.image - m) * factor + m
    return out


def resize(s: Sample, out_h: int, out_w: int) -> Sample:
    """Nearest-neighbour resize; normalised boxes are unaffected."""
    if (out_h, out_w) == s.image.shape[:2]:
        return s.copy()
    return Sample(
        resize_nearest(s.image, out_h, out_w),
        s.label,
        None if s.mask is None else resize_nearest(s.mask, out_h, out_w),
        None if s.box is None else np.array(s.box, dtype=np.float64),
    )


def multiscale_resize(s: Sample, scale_range: Sequence[float], rng: np.random.Generator) -> Sample:
    lo, hi = float(scale_range[0]), float(scale_range[1])
    if not 0 < lo <= hi:
        raise AugmentError(f"bad scale range {scale_range}")
    scale = rng.uniform(lo, hi)
    h, w = s.image.shape[:2]
    return resize(s, max(1, round(h * scale)), max(1, round(w * scale)))


def random_crop(s: Sample, size, rng: np.random.Generator) -> Sample:
    """Crop a uniformly placed window; ``size`` is ``(h, w)`` pixels or a ratio."""
    h, w = s.image.shape[:2]
    if isinstance(size, float):
        ch, cw = max(1, round(h * size)), max(1, round(w * size))
    else:
        ch, cw = (int(size), int(size)) if np.isscalar(size) else (int(size[0]), int(size[1]))
    if ch > h or cw > w:
        raise CropLargerThanImage(f"crop {ch}x{cw} exceeds image {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    box = None
    if s.box is not None:
        cx, cy, bw, bh = s.box
        x1 = np.clip((cx - bw / 2) * w, x0, x0 + cw)
        x2 = np.clip((cx + bw / 2) * w, x0, x0 + cw)
        y1 = np.clip((cy - bh / 2) * h, y0, y0 + ch)
        y2 = np.clip((cy + bh / 2) * h, y0, y0 + ch)
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            raise SampleRejected("box fell outside the crop window")
        box = np.array([((x1 + x2) / 2 - x0) / cw, ((y1 + y2) / 2 - y0) / ch,
                        (x2 - x1) / cw, (y2 - y1) / ch])
    return Sample(
        s.image[y0:y0 + ch, x0:x0 + cw].copy(),
        s.label,
        None if s.mask is None else s.mask[y0:y0 + ch, x0:x0 + cw].copy(),
        box,
    ).validate()


def _soft(label, num_classes: int) -> np.ndarray:
    if isinstance(label, np.ndarray) and label.ndim == 1:
        return label.astype(np.float64)
    out = np.zeros(num_classes)
    out[int(label)] = 1.0
    return out


def mixup(s1: Sample, s2: Sample, lam: float, num_classes: int | None = None) -> Sample:
    """Convex blend ``lam * s1 + (1 - lam) * s2``.

    Class labels become the matching soft distribution; masks and boxes are
    taken from ``s1``. ``lam`` of 1 or 0 returns the corresponding input.
    """
    if s1.image.shape != s2.image.shape:
        raise ShapeMismatch(f"mixup of {s1.image.shape} and {s2.image.shape}")
    if not 0.0 <= lam <= 1.0:
        raise AugmentError(f"mixup lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return s1.copy()
    if lam == 0.0:
        return s2.copy()
    label = s1.label
    if s1.label is not None and s2.label is not None:
        if num_classes is None:
            raise AugmentError("mixup of class labels needs num_classes")
        label = lam * _soft(s1.label, num_classes) + (1.0 - lam) * _soft(s2.label, num_classes)
    return Sample(
        lam * s1.image + (1.0 - lam) * s2.image,
        label,
        None if s1.mask is None else s1.mask.copy(),
        None if s1.box is None else np.array(s1.box, dtype=np.float64),
    )


_QUADRANT_OFFSETS = ((0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5))  # TL, TR, BL, BR


def mosaic(s1: Sample, s2: Sample, s3: Sample, s4: Sample, primary_quadrant: int = 0) -> Sample:
    """2x2 tiling resized back to the input size.

    ``s1`` is the primary sample: it lands in ``primary_quadrant`` (0 = top
    left, then TR, BL, BR), its label is kept, and its box is mapped into that
    quadrant; the others fill the remaining quadrants in order.
    """
    samples = [s1, s2, s3, s4]
    shape = s1.image.shape
    if any(s.image.shape != shape for s in samples):
        raise ShapeMismatch("mosaic inputs must share one image shape")
    has_mask = [s.mask is not None for s in samples]
    if any(has_mask) and not all(has_mask):
        raise ShapeMismatch("mosaic inputs must all carry masks or none")
    order = [s2, s3, s4]
    tiles = order[:primary_quadrant] + [s1] + order[primary_quadrant:]
    h, w = shape[:2]

    def grid(parts):
        top = np.concatenate([parts[0], parts[1]], axis=1)
        bottom = np.concatenate([parts[2], parts[3]], axis=1)
        return resize_nearest(np.concatenate([top, bottom], axis=0), h, w)

    box = None
    if s1.box is not None:
        ox, oy = _QUADRANT_OFFSETS[primary_quadrant]
        cx, cy, bw, bh = s1.box
        box = np.array([0.5 * cx + ox, 0.5 * cy + oy, 0.5 * bw, 0.5 * bh])
    return Sample(
        grid([t.image for t in tiles]),
        s1.label,
        grid([t.mask for t in tiles]) if all(has_mask) else None,
        box,
    )


def policy_stand_in(s: Sample, rng: np.random.Generator, contrast_range=(0.5, 1.5), sigma=0.1) -> Sample:
    """Stand-in for a learned augmentation policy: one of rotate-90, contrast, noise."""
    pick = int(rng.integers(3))
    if pick == 0:
        return rotate90(s, int(rng.integers(1, 4)))
    if pick == 1:
        return contrast(s, rng.uniform(*contrast_range))
    return add_noise(s, sigma, rng)


# ---------------------------------------------------------------- AugOp


class AugKind(str, enum.Enum):
    HFLIP = "hflip"
    NOISE = "noise"
    MULTISCALE = "multiscale"
    RANDOM_CROP = "random_crop"
    ROTATE = "rotate"
    MIXUP = "mixup"
    MOSAIC = "mosaic"
    POLICY_STAND_IN = "policy_stand_in"


STRONG = frozenset({AugKind.MIXUP, AugKind.MOSAIC, AugKind.POLICY_STAND_IN})

_DEFAULTS: dict[AugKind, dict[str, Any]] = {
    AugKind.HFLIP: {"p": 0.5},
    AugKind.NOISE: {"sigma": 0.05},
    AugKind.MULTISCALE: {"scale_range": [0.79, 1.0]},
    AugKind.RANDOM_CROP: {"size": 0.75},
    AugKind.ROTATE: {"angles": [0, 90, 180, 270]},
    AugKind.MIXUP: {"alpha": 1.5, "num_classes": None},
    AugKind.MOSAIC: {"random_quadrant": True, "mixup": False, "mixup_alpha": 1.5, "num_classes": None},
    AugKind.POLICY_STAND_IN: {"contrast_range": [0.5, 1.5], "sigma": 0.1},
}


@dataclass(frozen=True)
class AugOp:
    kind: AugKind
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        kind = AugKind(self.kind)
        unknown = set(self.params) - set(_DEFAULTS[kind])
        if unknown:
            raise AugmentError(f"{kind.value}: unknown parameters {sorted(unknown)}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", {**_DEFAULTS[kind], **self.params})

    @property
    def strong(self) -> bool:
        return self.kind in STRONG

    @property
    def label(self) -> str:
        if self.kind is AugKind.MOSAIC and self.params["mixup"]:
            return "mosaic+mixup"
        return self.kind.value

    @property
    def partners_needed(self) -> int:
        if self.kind is AugKind.MIXUP:
            return 1
        if self.kind is AugKind.MOSAIC:
            return 4 if self.params["mixup"] else 3
        return 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, **{k: v for k, v in self.params.items() if v is not None}}

    @classmethod
    def from_dict(cls, d: dict) -> "AugOp":
        d = dict(d)
        try:
            kind = d.pop("kind")
        except KeyError:
            raise AugmentError("augmentation op is missing 'kind'") from None
        return cls(kind, d)

    def __call__(self, s: Sample, rng: np.random.Generator, partners: Sequence[Sample] = ()) -> Sample:
        p, k = self.params, self.kind
        if len(partners) < self.partners_needed:
            raise InsufficientSamples(
                f"{self.label} needs {self.partners_needed} partner samples, got {len(partners)}"
            )
        if k is AugKind.HFLIP:
            return hflip(s) if rng.uniform() < p["p"] else s.copy()
        if k is AugKind.NOISE:
            return add_noise(s, p["sigma"], rng)
        if k is AugKind.MULTISCALE:
            return multiscale_resize(s, p["scale_range"], rng)
        if k is AugKind.RANDOM_CROP:
            return random_crop(s, p["size"], rng)
        if k is AugKind.ROTATE:
            return rotate(s, p["angles"], rng)
        if k is AugKind.MIXUP:
            return mixup(s, _fit(partners[0], s), rng.beta(p["alpha"], p["alpha"]), p["num_classes"])
        if k is AugKind.MOSAIC:
            q = int(rng.integers(4)) if p["random_quadrant"] else 0
            out = mosaic(s, *[_fit(t, s) for t in partners[:3]], primary_quadrant=q)
            if p["mixup"]:
                lam = rng.beta(p["mixup_alpha"], p["mixup_alpha"])
                out = mixup(out, _fit(partners[3], out), max(lam, 1.0 - lam), p["num_classes"])
            return out
        return policy_stand_in(s, rng, tuple(p["contrast_range"]), p["sigma"])


def _fit(partner: Sample, like: Sample) -> Sample:
    h, w = like.image.shape[:2]
    return partner if partner.image.shape[:2] == (h, w) else resize(partner, h, w)


# ------------------------------------------------------------- pipelines


@dataclass(frozen=True)
class AugBranch:
    ops: tuple[AugOp, ...]

    def __post_init__(self) -> None:
        ops = tuple(op if isinstance(op, AugOp) else AugOp.from_dict(op) for op in self.ops)
        strong = [op.label for op in ops if op.strong]
        if len(strong) > 1:
            raise BranchConflict(f"a branch may hold at most one strong augmentation, got {strong}")
        object.__setattr__(self, "ops", ops)

    @property
    def partners_needed(self) -> int:
        return max((op.partners_needed for op in self.ops), default=0)


def _run_ops(ops, s: Sample, rng, partners, log, branch: int | None) -> Sample:
    for op in ops:
        s = op(s, rng, partners)
        if log is not None:
            log.append((branch, op.label))
    return s.validate()


def _check_probs(p, n: int, what: str) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (n,) or np.any(arr < 0) or not np.isclose(arr.sum(), 1.0, atol=1e-9):
        raise AugmentError(f"{what} must be {n} non-negative probabilities summing to 1, got {p}")
    return arr


@dataclass
class MultiBranchPipeline:
    branches: list[AugBranch]
    start_probs: Sequence[float]
    end_probs: Sequence[float] | None = None
    total_epochs: int = 1

    def __post_init__(self) -> None:
        self.branches = [b if isinstance(b, AugBranch) else AugBranch(tuple(b)) for b in self.branches]
        if not self.branches:
            raise AugmentError("pipeline needs at least one branch")
        n = len(self.branches)
        self.start_probs = _check_probs(self.start_probs, n, "start_probs")
        self.end_probs = self.start_probs.copy() if self.end_probs is None else _check_probs(
            self.end_probs, n, "end_probs")
        if self.total_epochs < 1:
            raise AugmentError("total_epochs must be >= 1")

    @property
    def partners_needed(self) -> int:
        return max(b.partners_needed for b in self.branches)

    def branch_probs(self, epoch: int) -> np.ndarray:
        if epoch <= 0:
            return self.start_probs.copy()
        if epoch >= self.total_epochs:
            return self.end_probs.copy()
        p = self.start_probs + (epoch / self.total_epochs) * (self.end_probs - self.start_probs)
        p = np.clip(p, 0.0, None)
        return p / p.sum()

    def choose(self, epoch: int, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.branches), p=self.branch_probs(epoch)))

    def apply(self, s: Sample, epoch: int, rng: np.random.Generator,
              partners: Sequence[Sample] = (), log: list | None = None) -> Sample:
        b = self.choose(epoch, rng)
        return _run_ops(self.branches[b].ops, s, rng, partners, log, b)

    def to_dict(self) -> dict:
        return {
            "start_probs": self.start_probs.tolist(),
            "end_probs": self.end_probs.tolist(),
            "branches": [[op.to_dict() for op in b.ops] for b in self.branches],
        }


@dataclass
class ParallelPipeline:
    """Every op on every sample, in order; no strong-op restriction."""

    ops: list[AugOp]

    def __post_init__(self) -> None:
        self.ops = [op if isinstance(op, AugOp) else AugOp.from_dict(op) for op in self.ops]

    @property
    def partners_needed(self) -> int:
        return max((op.partners_needed for op in self.ops), default=0)

    def apply(self, s: Sample, epoch: int, rng: np.random.Generator,
              partners: Sequence[Sample] = (), log: list | None = None) -> Sample:
        return _run_ops(self.ops, s, rng, partners, log, None)


def apply(pipeline, s: Sample, epoch: int, rng: np.random.Generator,
          partners: Sequence[Sample] = (), log: list | None = None) -> Sample:
    return pipeline.apply(s, epoch, rng, partners, log)


def branch_probs(pipeline: MultiBranchPipeline, epoch: int) -> np.ndarray:
    return pipeline.branch_probs(epoch)


# Default per-task branch layouts. Detection branch 2 pairs mosaic with
# mixup as one compound strong op.
def detection_branches() -> list[AugBranch]:
    return [
        AugBranch((AugOp("multiscale"), AugOp("hflip"), AugOp("policy_stand_in"), AugOp("noise"))),
        AugBranch((AugOp("mosaic", {"mixup": True}), AugOp("hflip"), AugOp("noise"))),
    ]


def segmentation_branches() -> list[AugBranch]:
    return [
        AugBranch((AugOp("multiscale", {"scale_range": [0.5, 2.0]}), AugOp("random_crop"),
                   AugOp("rotate"), AugOp("noise"))),
        AugBranch((AugOp("mosaic"), AugOp("random_crop"), AugOp("hflip"), AugOp("noise"))),
    ]

