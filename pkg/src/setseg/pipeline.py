"""Decoder and parser: class-ID densification, resize/crop/pad, target building.

All geometry uses nearest-neighbor resampling with pixel-center index
mapping, so a parse at scale 1.0 is the identity on pixel values. Images and
masks are padded bottom/right to a square target; the validity mask is the
top-left rectangle covering the resized content, and every downstream mask
loss restricts its sums to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Contiguous ID mapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdMapper:
    """Order-preserving densification of sparse class IDs into 1..K."""

    original_to_contiguous: dict[int, int]
    contiguous_to_original: dict[int, int]

    @property
    def num_classes(self) -> int:
        return len(self.original_to_contiguous)

    def to_contiguous(self, original_id: int) -> int:
        try:
            return self.original_to_contiguous[original_id]
        except KeyError:
            raise PipelineError(f"unknown class ID {original_id}") from None

    def to_original(self, contiguous_id: int) -> int:
        try:
            return self.contiguous_to_original[contiguous_id]
        except KeyError:
            raise PipelineError(f"unknown contiguous ID {contiguous_id}") from None


def build_id_mapper(original_ids) -> IdMapper:
    ids = list(original_ids)
    if not ids:
        raise PipelineError("cannot build an ID mapper from an empty ID set")
    if len(set(ids)) != len(ids):
        raise PipelineError("duplicate IDs in mapper input")
    if any(i <= 0 for i in ids):
        raise PipelineError("class IDs must be positive")
    forward = {orig: k + 1 for k, orig in enumerate(sorted(ids))}
    return IdMapper(forward, {v: k for k, v in forward.items()})


# ---------------------------------------------------------------------------
# Parser configuration and outputs
# ---------------------------------------------------------------------------

@dataclass
class ParserConfig:
    target_size: int = 640
    crop_probability: float = 0.5
    crop_sizes: tuple[int, ...] = (400, 500, 600)
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    num_classes: int = 4


@dataclass
class PanopticSample:
    image: Tensor                 # [1, H, W, 3] normalized floats
    contiguous_mask: np.ndarray   # [H, W] int
    instance_mask: np.ndarray     # [H, W] int
    valid_mask: np.ndarray        # [H, W] bool, False on padding
    image_id: int


@dataclass
class TargetSet:
    masks: list[np.ndarray]       # per instance, binary uint8 [H, W]
    labels: list[int]             # contiguous class IDs, 1..K

    @property
    def count(self) -> int:
        return len(self.masks)


@dataclass
class ParseStats:
    dropped_instances: int = 0

    def reset(self):
        self.dropped_instances = 0


PARSE_STATS = ParseStats()


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def resize_nearest(grid: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Nearest-neighbor resample of the first two axes (identity at scale 1)."""
    h, w = grid.shape[:2]
    rows = np.minimum(((np.arange(new_h) + 0.5) * (h / new_h)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(new_w) + 0.5) * (w / new_w)).astype(np.int64), w - 1)
    return grid[rows][:, cols]


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample of a mask grid by an integer factor."""
    h, w = mask.shape
    return resize_nearest(mask, h // factor, w // factor)


def entry_to_arrays(entry: dict):
    """Decode a record entry into (rgb, contiguous, instance, image_id) arrays."""
    h = int(entry["image/height"][0])
    w = int(entry["image/width"][0])
    rgb = np.frombuffer(entry["image/encoded"], dtype=np.uint8).reshape(h, w, 3)
    cont = np.frombuffer(entry["segmentation/contiguous_mask"], dtype="<u2").reshape(h, w)
    inst = np.frombuffer(entry["segmentation/instance_mask"], dtype="<u2").reshape(h, w)
    return rgb, cont.astype(np.int64), inst.astype(np.int64), int(entry["image/id"][0])


# ---------------------------------------------------------------------------
# Parse
# ---------------------------------------------------------------------------

def parse(entry: dict, cfg: ParserConfig, rng_seed: int) -> tuple[PanopticSample, TargetSet]:
    """Decode, geometrically normalize, and label-prepare one record.

    Deterministic given (entry, cfg, rng_seed). With probability
    ``cfg.crop_probability`` a random crop is taken and its shortest side
    resized to one of ``cfg.crop_sizes``; afterwards the longer side is fitted
    to ``cfg.target_size`` and the result zero-padded bottom/right to a square.
    """
    rgb, cont, inst, image_id = entry_to_arrays(entry)

    bad = np.unique(cont[cont > cfg.num_classes])
    if bad.size:
        raise PipelineError(
            f"unknown class ID {int(bad[0])} (mapper covers 1..{cfg.num_classes})"
        )

    rng = np.random.default_rng(rng_seed)
    if rng.random() < cfg.crop_probability:
        h, w = rgb.shape[:2]
        ch = int(rng.integers(max(1, h // 2), h + 1))
        cw = int(rng.integers(max(1, w // 2), w + 1))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        rgb = rgb[top:top + ch, left:left + cw]
        cont = cont[top:top + ch, left:left + cw]
        inst = inst[top:top + ch, left:left + cw]
        short = int(rng.choice(np.asarray(cfg.crop_sizes)))
        scale = short / min(ch, cw)
        sh, sw = max(1, round(ch * scale)), max(1, round(cw * scale))
        if ch <= cw:
            sh = short
        else:
            sw = short
        rgb = resize_nearest(rgb, sh, sw)
        cont = resize_nearest(cont, sh, sw)
        inst = resize_nearest(inst, sh, sw)

    h, w = rgb.shape[:2]
    target = cfg.target_size
    scale = target / max(h, w)
    new_h = target if h >= w else max(1, round(h * scale))
    new_w = target if w >= h else max(1, round(w * scale))
    rgb = resize_nearest(rgb, new_h, new_w)
    cont = resize_nearest(cont, new_h, new_w)
    inst = resize_nearest(inst, new_h, new_w)

    image = np.zeros((target, target, 3), dtype=np.float32)
    mean = np.asarray(cfg.mean, dtype=np.float32)
    std = np.asarray(cfg.std, dtype=np.float32)
    image[:new_h, :new_w] = (rgb.astype(np.float32) / 255.0 - mean) / std

    cont_full = np.zeros((target, target), dtype=np.int64)
    inst_full = np.zeros((target, target), dtype=np.int64)
    cont_full[:new_h, :new_w] = cont
    inst_full[:new_h, :new_w] = inst
    valid = np.zeros((target, target), dtype=bool)
    valid[:new_h, :new_w] = True

    sample = PanopticSample(
        image=Tensor(image[None]),
        contiguous_mask=cont_full,
        instance_mask=inst_full,
        valid_mask=valid,
        image_id=image_id,
    )
    targets = build_targets(cont_full, inst_full, valid)
    return sample, targets


def build_targets(contiguous_mask: np.ndarray, instance_mask: np.ndarray,
                  valid_mask: np.ndarray) -> TargetSet:
    """One binary mask + label per distinct instance in the valid region."""
    masks: list[np.ndarray] = []
    labels: list[int] = []
    region = valid_mask & (instance_mask != 0)
    for iid in np.unique(instance_mask[region]):
        m = (instance_mask == iid) & valid_mask
        if not m.any():
            PARSE_STATS.dropped_instances += 1
            continue
        label = int(contiguous_mask[m][0])
        if label == 0:
            PARSE_STATS.dropped_instances += 1
            continue
        masks.append(m.astype(np.uint8))
        labels.append(label)
    return TargetSet(masks=masks, labels=labels)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: Tensor                  # [B, H, W, 3]
    valid_masks: np.ndarray         # [B, H, W] bool
    target_sets: list[TargetSet]    # ragged, one per sample
    image_ids: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.images.shape[0]


def batch(samples: list[PanopticSample], targets: list[TargetSet]) -> Batch:
    """Stack padded samples along the batch axis; target sets stay ragged."""
    if not samples:
        raise PipelineError("cannot batch zero samples")
    shapes = {s.image.shape[1:] for s in samples}
    if len(shapes) != 1:
        raise PipelineError(f"mixed spatial sizes in batch: {sorted(shapes)}")
    images = Tensor(np.concatenate([s.image.data for s in samples], axis=0))
    valid = np.stack([s.valid_mask for s in samples], axis=0)
    return Batch(
        images=images,
        valid_masks=valid,
        target_sets=list(targets),
        image_ids=[s.image_id for s in samples],
    )
