"""Verification protocol: shape, unit, gradient, and differential checks.

Runs, in order: input-shape validation, the layer-wise shape suite, the
position-embedding reference statistic, gradient finite-difference checks,
loss unit fixtures (tolerance 1e-3), the matcher-vs-brute-force differential
suite, padding invariance, and the record round-trip suite. Loss fixtures
evaluate with the *configured* loss constants against values frozen at the
defaults, so perturbing a sensitive constant (dice epsilon, no-object
weight) makes exactly that check fail.
"""

from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import records, tensor as T
from .config import RunConfig
from .losses import classification_loss, dice_loss, focal_loss, total_loss
from .matcher import MatcherWeights, brute_force_match, build_cost_matrix, hungarian, pad_square
from .model import MaskClassificationModel, ModelConfig
from .pipeline import TargetSet, parse
from .tensor import Tape, Tensor, backward, no_grad

BIG = 40.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"[{status}] {self.name} (measured error {self.error:.3e})"
        if self.detail and not self.passed:
            msg += f" -- {self.detail}"
        return msg


def _central_diff(fn, arr, step=1e-5):
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        fp = fn(arr)
        arr[idx] = orig - step
        fm = fn(arr)
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
        it.iternext()
    return grad


def _rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def _synthetic_entry(rng, h, w, num_classes):
    inst = rng.integers(0, 4, size=(h, w)).astype(np.uint16)
    cont = np.where(inst > 0, ((inst - 1) % num_classes) + 1, 0).astype(np.uint16)
    return {
        "image/height": np.array([h], dtype=np.int64),
        "image/width": np.array([w], dtype=np.int64),
        "image/encoded": rng.integers(0, 256, size=3 * h * w, dtype=np.uint8).tobytes(),
        "segmentation/contiguous_mask": cont.astype("<u2").tobytes(),
        "segmentation/instance_mask": inst.astype("<u2").tobytes(),
        "image/id": np.array([0], dtype=np.int64),
    }


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def check_input_shapes(cfg: RunConfig) -> CheckResult:
    rng = np.random.default_rng(0)
    target = cfg.parser.target_size
    entry = _synthetic_entry(rng, max(8, target // 2), target, cfg.parser.num_classes)
    sample, targets = parse(entry, cfg.parser, rng_seed=0)
    ok = (
        sample.image.shape == (1, target, target, 3)
        and sample.contiguous_mask.shape == (target, target)
        and sample.valid_mask.shape == (target, target)
        and all(m.shape == (target, target) for m in targets.masks)
    )
    return CheckResult("input shape validation", ok, 0.0 if ok else 1.0,
                       f"image {sample.image.shape}")


def check_layer_shapes(cfg: RunConfig) -> CheckResult:
    m = cfg.model
    model = MaskClassificationModel(m)
    s, c = m.input_size, m.hidden_size
    rng = np.random.default_rng(0)
    with no_grad():
        image = Tensor(rng.standard_normal((1, s, s, 3)).astype(np.float32))
        feats = model.backbone_stub(image)
        encoded, mask_features = model.pixel_decoder(feats)
        dec = model.transformer_decoder(encoded)
        out = model.heads(dec, mask_features)
    expectations = [
        (feats.shape, (1, s // 32, s // 32, m.backbone_channels), "backbone"),
        (encoded.shape, (1, s // 32, s // 32, c), "encoded"),
        (mask_features.shape, (1, s // 4, s // 4, c), "pixel decoder"),
        (dec.shape, (1, m.n_queries, c), "transformer decoder"),
        (out.mask_logits.shape, (1, m.n_queries, s // 4, s // 4), "mask logits"),
        (out.class_logits.shape, (1, m.n_queries, m.num_classes + 1), "class logits"),
    ]
    bad = [f"{name}: {got} != {want}" for got, want, name in expectations if got != want]
    return CheckResult("layer-wise shape suite", not bad, float(len(bad)), "; ".join(bad))


def check_posembed_statistic(cfg: RunConfig) -> CheckResult:
    emb = T.sine_position_embedding(20, 20, 256)
    err = abs(float(emb.data.mean()) - 0.4937)
    return CheckResult("position embedding statistic", err <= 1e-3, err,
                       f"mean {float(emb.data.mean()):.8f}")


def check_gradients(cfg: RunConfig) -> CheckResult:
    rng = np.random.default_rng(1)
    worst = 0.0
    details = []

    mask_losses = {
        "dice": lambda t, g, v: dice_loss(t, g, v),
        "focal": lambda t, g, v: focal_loss(t, g, v),
    }
    for trial in range(5):
        arr = rng.standard_normal((3, 3))
        gt = rng.integers(0, 2, size=(3, 3))
        valid = np.ones((3, 3), bool)
        for fn in mask_losses.values():
            with Tape():
                x = Tensor(arr, requires_grad=True, dtype=np.float64)
                backward(fn(x, gt, valid))
            numeric = _central_diff(
                lambda a: fn(Tensor(a, dtype=np.float64), gt, valid).item(), arr.copy())
            worst = max(worst, _rel_err(x.grad, numeric))

    arr = rng.standard_normal((4, 5))
    labels = rng.integers(1, 6, size=4)
    with Tape():
        x = Tensor(arr, requires_grad=True, dtype=np.float64)
        backward(classification_loss(x, labels))
    numeric = _central_diff(
        lambda a: classification_loss(Tensor(a, dtype=np.float64), labels).item(), arr.copy())
    worst = max(worst, _rel_err(x.grad, numeric))

    # 2-layer toy network, all inputs and weights checked in 64-bit
    xa = rng.standard_normal((2, 6))
    w1a = rng.standard_normal((6, 8)) * 0.5
    w2a = rng.standard_normal((8, 4)) * 0.5

    def toy(x_, w1_, w2_):
        h = T.relu(T.matmul(x_, w1_))
        y = T.matmul(h, w2_)
        return T.mul(y, y).sum()

    with Tape():
        xt = Tensor(xa, requires_grad=True, dtype=np.float64)
        w1t = Tensor(w1a, requires_grad=True, dtype=np.float64)
        w2t = Tensor(w2a, requires_grad=True, dtype=np.float64)
        backward(toy(xt, w1t, w2t))
    for t, arrs, i in ((xt, [xa, w1a, w2a], 0), (w1t, [xa, w1a, w2a], 1),
                       (w2t, [xa, w1a, w2a], 2)):
        def f(a, arrs=arrs, i=i):
            copies = [np.array(v) for v in arrs]
            copies[i] = a
            with no_grad():
                return toy(*[Tensor(v, dtype=np.float64) for v in copies]).item()
        numeric = _central_diff(f, arrs[i].copy())
        worst = max(worst, _rel_err(t.grad, numeric))

    # dead-parameter detector on a small full model
    toy_cfg = ModelConfig(input_size=64, n_queries=8, hidden_size=32,
                          backbone_channels=32, num_encoder_layers=1,
                          num_decoder_layers=1, num_heads=4, num_classes=4, seed=0)
    model = MaskClassificationModel(toy_cfg)
    gt1 = np.zeros((64, 64), dtype=np.uint8)
    gt1[8:40, 8:40] = 1
    targets = TargetSet([gt1], [1])
    valid = np.ones((64, 64), bool)
    with Tape():
        outputs = model.forward(Tensor(rng.standard_normal((1, 64, 64, 3)).astype(np.float32)))
        with no_grad():
            assignment = hungarian(build_cost_matrix(
                outputs, targets, MatcherWeights(), valid, cfg.losses))
        bundle = total_loss(outputs, targets, assignment, cfg.losses, valid)
        backward(bundle.total_tensor)
    dead = [n for n, p in model.params.items() if p.grad is None or not np.abs(p.grad).any()]
    if dead:
        details.append(f"dead parameters: {dead[:4]}")

    passed = worst <= 1e-4 and not dead
    return CheckResult("gradient finite-difference suite", passed, worst, "; ".join(details))


def check_loss_fixtures(cfg: RunConfig) -> CheckResult:
    lc = cfg.losses
    fixtures = []

    logits_id = Tensor(np.full((2, 2), BIG, dtype=np.float64))
    fixtures.append((
        "dice identity",
        dice_loss(logits_id, np.ones((2, 2)), np.ones((2, 2), bool), eps=lc.dice_eps).item(),
        0.0,
    ))
    logits_dj = Tensor(np.array([[BIG, BIG], [-BIG, -BIG]], dtype=np.float64))
    fixtures.append((
        "dice disjoint",
        dice_loss(logits_dj, np.array([[0, 0], [1, 1]]), np.ones((2, 2), bool),
                  eps=lc.dice_eps).item(),
        0.8,   # 1 - (0 + 1)/(2 + 2 + 1) at the default epsilon of 1
    ))
    fixtures.append((
        "focal single pixel",
        focal_loss(Tensor(np.array([[math.log(9.0)]], dtype=np.float64)),
                   np.array([[1]]), np.ones((1, 1), bool),
                   alpha=lc.focal_alpha, gamma=lc.focal_gamma).item(),
        0.25 * 0.01 * -math.log(0.9),
    ))
    k = 4
    fixtures.append((
        "classification uniform",
        classification_loss(Tensor(np.zeros((6, k + 1))), np.array([1, 2, 3, 4, 1, 2]),
                            no_object_weight=lc.no_object_weight).item(),
        math.log(k + 1),
    ))
    q0 = [math.log(0.5)] + [math.log(0.5 / 3)] * 3
    q1 = [math.log(0.25)] * 4
    fixtures.append((
        "classification matched plus no-object",
        classification_loss(Tensor(np.array([q0, q1]), dtype=np.float64), np.array([1, 4]),
                            no_object_weight=lc.no_object_weight).item(),
        (-math.log(0.5) + 1e-4 * -math.log(0.25)) / 1.0001,
    ))
    # heavier no-object mass so a 10x weight change moves the value past 1e-3
    qn = [math.log(0.33), math.log(0.33), math.log(0.33), math.log(0.01)]
    logits_w = Tensor(np.array([q0] + [qn] * 9, dtype=np.float64))
    labels_w = np.array([1] + [4] * 9)
    fixtures.append((
        "classification no-object weighting",
        classification_loss(logits_w, labels_w,
                            no_object_weight=lc.no_object_weight).item(),
        (-math.log(0.5) + 9 * 1e-4 * -math.log(0.01)) / (1 + 9 * 1e-4),
    ))

    worst = 0.0
    failures = []
    for name, got, want in fixtures:
        err = abs(got - want)
        worst = max(worst, err)
        if err > 1e-3:
            failures.append(f"{name}: got {got:.6f}, expected {want:.6f}")
    return CheckResult("loss unit fixtures", not failures, worst, "; ".join(failures))


def check_matcher_differential(cfg: RunConfig) -> CheckResult:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n_q = int(rng.integers(1, 9))
        n = int(rng.integers(1, n_q + 1))
        real = rng.random((n, n_q))
        got = hungarian(pad_square(real, n_q)).total_real_cost
        want = brute_force_match(real).total_real_cost
        worst = max(worst, abs(got - want))
    return CheckResult("matcher differential suite", worst == 0.0, worst)


def check_padding_invariance(cfg: RunConfig) -> CheckResult:
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        logits = rng.standard_normal((h, w))
        gt = rng.integers(0, 2, size=(h, w))
        valid = np.ones((h, w), bool)
        pad_r = int(rng.integers(1, 4))
        logits_p = np.concatenate([logits, rng.standard_normal((pad_r, w))], axis=0)
        gt_p = np.concatenate([gt, rng.integers(0, 2, size=(pad_r, w))], axis=0)
        valid_p = np.concatenate([valid, np.zeros((pad_r, w), bool)], axis=0)
        for fn in (
            lambda l, g, v: dice_loss(Tensor(l), g, v, eps=cfg.losses.dice_eps).item(),
            lambda l, g, v: focal_loss(Tensor(l), g, v, alpha=cfg.losses.focal_alpha,
                                       gamma=cfg.losses.focal_gamma).item(),
        ):
            worst = max(worst, abs(fn(logits, gt, valid) - fn(logits_p, gt_p, valid_p)))
    return CheckResult("padding invariance suite", worst <= 1e-7, worst)


def check_record_roundtrip(cfg: RunConfig) -> CheckResult:
    rng = np.random.default_rng(4)
    entries = []
    for i in range(100):
        h = int(rng.integers(2, 12))
        w = int(rng.integers(2, 12))
        entries.append(_synthetic_entry(rng, h, w, 4) | {
            "image/id": np.array([i], dtype=np.int64)})
    with tempfile.TemporaryDirectory() as tmp:
        ss = records.write_shards(entries, 4, Path(tmp) / "a")
        back = list(records.read_shards(ss))
        ss2 = records.write_shards(entries, 4, Path(tmp) / "b")
        deterministic = all(
            p1.read_bytes() == p2.read_bytes()
            for p1, p2 in zip(ss.shard_paths, ss2.shard_paths)
        )
        ratio = ss.byte_balance()
    by_id = {int(e["image/id"][0]): e for e in back}
    exact = len(back) == len(entries) and all(
        by_id[int(e["image/id"][0])]["image/encoded"] == e["image/encoded"]
        and np.array_equal(by_id[int(e["image/id"][0])]["image/height"], e["image/height"])
        for e in entries
    )
    ok = exact and deterministic and ratio <= 1.10
    err = 0.0 if exact and deterministic else 1.0
    return CheckResult("record round-trip suite", ok, max(err, ratio - 1.10 if ratio > 1.10 else err),
                       f"balance ratio {ratio:.4f}")


CHECKS = (
    check_input_shapes,
    check_layer_shapes,
    check_posembed_statistic,
    check_gradients,
    check_loss_fixtures,
    check_matcher_differential,
    check_padding_invariance,
    check_record_roundtrip,
)


def run_verify(cfg: RunConfig, emit=print) -> list[CheckResult]:
    results = []
    for check in CHECKS:
        result = check(cfg)
        results.append(result)
        emit(result.line())
    failed = [r for r in results if not r.passed]
    emit(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return results
