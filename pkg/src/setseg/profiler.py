"""Per-stage wall-time breakdown of the training step.

Stages (read, parse, match, forward, backward, update) are timed with
contiguous clock reads, so the stage times partition each step exactly and
their sum equals the measured total up to a final summation rounding.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .config import RunConfig
from .losses import total_loss
from .matcher import build_cost_matrix, hungarian
from .model import MaskClassificationModel
from .pipeline import batch as make_batch, parse
from .tensor import Tape, backward, no_grad
from .trainer import _visit_seed, clip_gradients, load_entries, make_optimizer

STAGES = ("read", "parse", "match", "forward", "backward", "update")


@dataclass
class ProfileReport:
    steps: int
    records: int
    stage_seconds: dict[str, float] = field(default_factory=dict)
    total_seconds: float = 0.0

    @property
    def records_per_second(self) -> float:
        return self.records / self.total_seconds if self.total_seconds > 0 else 0.0

    def as_text(self) -> str:
        if self.steps == 0:
            return "no steps profiled\n"
        lines = [f"steps {self.steps}  records {self.records}  "
                 f"total {self.total_seconds:.3f}s  "
                 f"records/sec {self.records_per_second:.1f}"]
        for name in STAGES:
            sec = self.stage_seconds.get(name, 0.0)
            share = 100.0 * sec / self.total_seconds if self.total_seconds > 0 else 0.0
            lines.append(f"  {name:<9} {sec:8.3f}s  {share:5.1f}%")
        return "\n".join(lines) + "\n"


def profile_run(cfg: RunConfig, data_dir, steps: int) -> ProfileReport:
    report = ProfileReport(steps=steps, records=0,
                           stage_seconds={name: 0.0 for name in STAGES})
    if steps == 0:
        return report

    entries = load_entries(data_dir)
    model = MaskClassificationModel(cfg.model)
    optimizer = make_optimizer(cfg, model)
    workers = cfg.trainer.parse_workers
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    b = cfg.trainer.batch_size

    try:
        for step in range(steps):
            t0 = time.perf_counter()
            visits = [step * b + j for j in range(b)]
            raw = [entries[v % len(entries)] for v in visits]
            seeds = [_visit_seed(cfg.seed, v) for v in visits]
            t1 = time.perf_counter()

            if pool is not None:
                parsed = list(pool.map(lambda a: parse(a[0], cfg.parser, a[1]),
                                       zip(raw, seeds)))
            else:
                parsed = [parse(e, cfg.parser, s) for e, s in zip(raw, seeds)]
            batch_data = make_batch([s for s, _ in parsed], [t for _, t in parsed])
            t2 = time.perf_counter()

            with Tape():
                outputs = model.forward(batch_data.images)
                t3 = time.perf_counter()

                assignments = []
                with no_grad():
                    for i in range(batch_data.size):
                        cm = build_cost_matrix(outputs, batch_data.target_sets[i],
                                               cfg.matcher, batch_data.valid_masks[i],
                                               cfg.losses, batch_index=i)
                        assignments.append(hungarian(cm))
                t4 = time.perf_counter()

                totals = []
                for i, assignment in enumerate(assignments):
                    bundle = total_loss(outputs, batch_data.target_sets[i], assignment,
                                        cfg.losses, batch_data.valid_masks[i], batch_index=i)
                    totals.append(bundle.total_tensor)
                acc = totals[0]
                for t in totals[1:]:
                    acc = acc + t
                model.zero_grad()
                backward(acc * (1.0 / len(totals)))
                t5 = time.perf_counter()

            clip_gradients(model.params, cfg.trainer.grad_clip_norm)
            optimizer.step()
            t6 = time.perf_counter()

            # boundaries are contiguous clock reads; stages partition the step
            report.stage_seconds["read"] += t1 - t0
            report.stage_seconds["parse"] += t2 - t1
            report.stage_seconds["forward"] += t3 - t2
            report.stage_seconds["match"] += t4 - t3
            report.stage_seconds["backward"] += t5 - t4
            report.stage_seconds["update"] += t6 - t5
            report.total_seconds += t6 - t0
            report.records += b
    finally:
        if pool is not None:
            pool.shutdown()
    return report
