"""Ingestion and the training/evaluation loops.

Training is an in-process loop: parse -> batch -> forward -> match ->
loss -> backward -> clipped update. A background producer fills a bounded
batch queue (parse work optionally fanned out to a thread pool); batch
order and per-record augmentation seeds are derived deterministically from
the run seed, so a fixed (config, seed) reproduces the loss CSV bit-exactly.
"""

from __future__ import annotations

import csv
import math
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import records, synth
from .config import RunConfig
from .evaluator import SegmentSet, accumulate, postprocess, summarize
from .losses import total_loss
from .matcher import NanCostError, build_cost_matrix, hungarian
from .model import MaskClassificationModel, save_checkpoint
from .pipeline import (
    Batch, ParserConfig, batch as make_batch, build_id_mapper, downsample_mask, parse,
)
from .tensor import Tape, backward, no_grad


class TrainError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Ingestion: annotations -> contiguous masks -> shards
# ---------------------------------------------------------------------------

def ingest(annotations_path, shard_count: int, out_dir, known_class_ids=None):
    """Convert a JSON-lines annotation set into balanced binary shards."""
    annotations_path = Path(annotations_path)
    ann = list(synth.read_annotations(annotations_path))
    if not ann:
        raise TrainError(f"no annotations in {annotations_path}")
    if known_class_ids is None:
        ids = sorted({seg["category_id"] for rec in ann for seg in rec["segments"]})
    else:
        ids = sorted(known_class_ids)
    mapper = build_id_mapper(ids)

    def entries():
        for rec in ann:
            rgb, inst = synth.load_annotation_arrays(annotations_path, rec)
            lut = np.zeros(int(inst.max()) + 1, dtype=np.uint16)
            for seg in rec["segments"]:
                lut[seg["instance_id"]] = mapper.to_contiguous(seg["category_id"])
            cont = lut[inst]
            yield {
                "image/height": np.array([rec["height"]], dtype=np.int64),
                "image/width": np.array([rec["width"]], dtype=np.int64),
                "image/encoded": rgb.tobytes(),
                "segmentation/contiguous_mask": cont.astype("<u2").tobytes(),
                "segmentation/instance_mask": inst.astype("<u2").tobytes(),
                "image/id": np.array([rec["image_id"]], dtype=np.int64),
            }

    shard_set = records.write_shards(
        entries(), shard_count, out_dir, class_mapping=mapper.original_to_contiguous
    )
    return shard_set, mapper


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            p.data = p.data - self.lr * update.astype(p.data.dtype)


class SGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.buf[name] = self.momentum * self.buf[name] + g
            p.data = p.data - self.lr * self.buf[name].astype(p.data.dtype)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.square(p.grad.astype(np.float64)).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def make_optimizer(cfg: RunConfig, model: MaskClassificationModel):
    t = cfg.trainer
    if t.optimizer == "adam":
        return Adam(model.params, lr=t.learning_rate, beta1=t.momentum, beta2=t.beta2)
    if t.optimizer == "sgd":
        return SGD(model.params, lr=t.learning_rate, momentum=t.momentum)
    raise TrainError(f"unknown optimizer {t.optimizer!r}")


# ---------------------------------------------------------------------------
# Data feeding
# ---------------------------------------------------------------------------

def load_entries(data_dir) -> list[dict]:
    shard_set = records.load_manifest(data_dir)
    return list(records.read_shards(shard_set))


def _visit_seed(run_seed: int, visit: int) -> int:
    return (run_seed * 1_000_003 + visit) % (2**63)


def parse_visit(entries, cfg: RunConfig, visit: int):
    entry = entries[visit % len(entries)]
    return parse(entry, cfg.parser, _visit_seed(cfg.seed, visit))


def assemble_batch(entries, cfg: RunConfig, step: int, pool=None) -> Batch:
    b = cfg.trainer.batch_size
    visits = [step * b + j for j in range(b)]
    if pool is not None:
        parsed = list(pool.map(lambda v: parse_visit(entries, cfg, v), visits))
    else:
        parsed = [parse_visit(entries, cfg, v) for v in visits]
    samples = [s for s, _ in parsed]
    targets = [t for _, t in parsed]
    return make_batch(samples, targets)


class BatchStream:
    """Producer thread filling a bounded queue with ready batches."""

    def __init__(self, entries, cfg: RunConfig, steps: int):
        self.entries = entries
        self.cfg = cfg
        self.steps = steps
        self.queue: queue.Queue = queue.Queue(maxsize=max(1, cfg.trainer.queue_depth))
        self._thread = threading.Thread(target=self._produce, daemon=True)
        self._thread.start()

    def _produce(self):
        workers = self.cfg.trainer.parse_workers
        pool = ThreadPoolExecutor(workers) if workers > 1 else None
        try:
            for step in range(self.steps):
                self.queue.put(assemble_batch(self.entries, self.cfg, step, pool))
        except BaseException as err:  # surfaced on the consumer side
            self.queue.put(err)
        finally:
            if pool is not None:
                pool.shutdown()

    def __iter__(self):
        for _ in range(self.steps):
            item = self.queue.get()
            if isinstance(item, BaseException):
                raise item
            yield item


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    csv_path: Path
    checkpoint_path: Path
    rows: list[tuple]
    initial_total: float
    final_total: float


def _dump_nan_diagnostics(out_dir: Path, step: int, batch_data: Batch, detail: str):
    (out_dir / "nan_batch.txt").write_text(
        f"step {step}\nimage_ids {batch_data.image_ids}\n{detail}\n"
    )


def train_step(model, batch_data: Batch, cfg: RunConfig):
    """One optimization step; returns mean (classification, focal, dice, total)."""
    with Tape():
        outputs = model.forward(batch_data.images)
        totals = []
        comps = np.zeros(3, dtype=np.float64)
        for b in range(batch_data.size):
            targets = batch_data.target_sets[b]
            valid = batch_data.valid_masks[b]
            with no_grad():
                cm = build_cost_matrix(outputs, targets, cfg.matcher, valid,
                                       cfg.losses, batch_index=b)
                assignment = hungarian(cm)
            bundle = total_loss(outputs, targets, assignment, cfg.losses, valid,
                                batch_index=b)
            totals.append(bundle.total_tensor)
            comps += (bundle.classification, bundle.focal, bundle.dice)
        acc = totals[0]
        for t in totals[1:]:
            acc = acc + t
        mean_total = acc * (1.0 / len(totals))
        model.zero_grad()
        backward(mean_total)
    comps /= batch_data.size
    return float(comps[0]), float(comps[1]), float(comps[2]), mean_total.item()


def train(cfg: RunConfig, data_dir, out_dir) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = load_entries(data_dir)
    model = MaskClassificationModel(cfg.model)
    optimizer = make_optimizer(cfg, model)
    steps = cfg.trainer.steps

    rows = []
    stream = BatchStream(entries, cfg, steps)
    for step, batch_data in enumerate(stream):
        try:
            cls_v, focal_v, dice_v, total_v = train_step(model, batch_data, cfg)
        except NanCostError as err:
            _dump_nan_diagnostics(out_dir, step, batch_data, detail=str(err))
            raise TrainError(
                f"non-finite loss at step {step} (batch images {batch_data.image_ids}): {err}"
            ) from None
        if not math.isfinite(total_v):
            _dump_nan_diagnostics(
                out_dir, step, batch_data,
                detail=f"components cls={cls_v} focal={focal_v} dice={dice_v}",
            )
            raise TrainError(
                f"non-finite loss at step {step} (batch images {batch_data.image_ids}); "
                f"diagnostics in {out_dir / 'nan_batch.txt'}"
            )
        clip_gradients(model.params, cfg.trainer.grad_clip_norm)
        optimizer.step()
        rows.append((step, cls_v, focal_v, dice_v, total_v))
        if cfg.trainer.checkpoint_every > 0 and (step + 1) % cfg.trainer.checkpoint_every == 0:
            save_checkpoint(model, out_dir / f"ckpt-{step + 1:06d}.ckpt")

    csv_path = out_dir / "loss.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "classification", "focal", "dice", "total"])
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    ckpt_path = out_dir / "final.ckpt"
    save_checkpoint(model, ckpt_path)
    return TrainResult(
        csv_path=csv_path,
        checkpoint_path=ckpt_path,
        rows=rows,
        initial_total=rows[0][4] if rows else float("nan"),
        final_total=rows[-1][4] if rows else float("nan"),
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def ground_truth_segments(targets, valid_mask, factor: int) -> SegmentSet:
    """Target masks at mask-logit resolution; padding becomes void."""
    masks = []
    labels = []
    for m, label in zip(targets.masks, targets.labels):
        small = downsample_mask(m, factor)
        if small.any():
            masks.append(small.astype(np.uint8))
            labels.append(label)
    void = ~downsample_mask(valid_mask.astype(np.uint8), factor).astype(bool)
    return SegmentSet(masks, labels, void=void)


def evaluate(cfg: RunConfig, data_dir, checkpoint_path, out_dir):
    from .model import load_checkpoint

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = load_entries(data_dir)
    model = MaskClassificationModel(cfg.model)
    load_checkpoint(model, checkpoint_path)

    eval_parser = ParserConfig(**{**cfg.parser.__dict__, "crop_probability": 0.0})
    stats: dict = {}
    for i, entry in enumerate(entries):
        sample, targets = parse(entry, eval_parser, rng_seed=0)
        with no_grad():
            outputs = model.forward(sample.image)
        pred = postprocess(outputs, cfg.evaluator)
        factor = sample.valid_mask.shape[0] // outputs.mask_logits.shape[2]
        gt = ground_truth_segments(targets, sample.valid_mask, factor)
        accumulate(stats, pred, gt)
    result = summarize(stats)

    report_txt = out_dir / "eval_report.txt"
    report_csv = out_dir / "eval_report.csv"
    lines = [
        f"PQ {result.pq:.6f}",
        f"SQ {result.sq:.6f}",
        f"RQ {result.rq:.6f}",
    ]
    per_class_pq = result.per_class_pq
    for c in sorted(result.per_class):
        s = result.per_class[c]
        lines.append(
            f"class {c}: PQ {per_class_pq[c]:.6f} TP {s.tp} FP {s.fp} FN {s.fn}"
        )
    report_txt.write_text("\n".join(lines) + "\n")
    with open(report_csv, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "pq", "tp", "fp", "fn", "iou_sum"])
        writer.writerow(["all", result.pq, "", "", "", ""])
        for c in sorted(result.per_class):
            s = result.per_class[c]
            writer.writerow([c, per_class_pq[c], s.tp, s.fp, s.fn, s.iou_sum])
    return result
