"""Seeded SGD training for the generation and parsing networks.

The generation network trains on mixed patch streams: face-region pairs
drive the structural branch with plain MSE, hair-region pairs drive the
textural branch with the sorted-matching objective, and the shared trunk
accumulates gradients from both. Each batch draws half its patches from
each stream so both terms stay populated every step. The parsing network
trains on dense per-pixel labels at its output resolution.

All shuffling flows from one seeded generator, so a fixed seed and fixed
data order reproduce bitwise-identical weights.

The published learning rate for sketch generation (1e-10) presumes raw
0-255 pixel intensities; pixels here live in [0, 1], which scales the
MSE gradient by 1/255^2, so the equivalent default is 1e-10 * 255^2.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from sketchgen import losses, networks, ops
from sketchgen.data import FACE, HAIR, PatchPair
from sketchgen.networks import NetworkSpec, NetworkWeights
from sketchgen.ops import ConvLayerParams, ShapeError

LR_BFCN_DEFAULT = 1e-10 * 255.0 ** 2
LR_PNET_DEFAULT = 1e-3

GRADCHECK_TARGETS = (
    "mse", "smmse", "softmax", "conv", "relu", "maxpool", "lrn",
    "bfcn-tiny", "pnet-tiny",
)
GRADCHECK_TOLERANCE = 1e-4


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    beta: float = 10.0
    lr_bfcn: float = LR_BFCN_DEFAULT
    lr_pnet: float = LR_PNET_DEFAULT
    epochs_bfcn: int = 150
    epochs_pnet: int = 100
    batch_size: int = 16
    patch_size: int = 32
    stride: int = 16
    ssim_threshold: float = 0.6
    augment_lo: float = 0.625
    augment_hi: float = 1.125
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        for name in ("lr_bfcn", "lr_pnet"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_bfcn", "epochs_pnet", "patch_size", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2 (one per branch)")
        if not 0.0 < self.augment_lo <= self.augment_hi < 2.0:
            raise ValueError(
                f"augment range [{self.augment_lo}, {self.augment_hi}] "
                f"must be increasing and within (0, 2)"
            )
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    loss_s: float | None
    loss_t: float | None
    loss_g: float | None
    loss_p: float | None
    seconds: float


@dataclass
class TrainReport:
    records: list = field(default_factory=list)

    CSV_HEADER = ("epoch", "loss_s", "loss_t", "loss_g", "loss_p", "seconds")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for r in self.records:
                writer.writerow([
                    r.epoch,
                    "" if r.loss_s is None else repr(r.loss_s),
                    "" if r.loss_t is None else repr(r.loss_t),
                    "" if r.loss_g is None else repr(r.loss_g),
                    "" if r.loss_p is None else repr(r.loss_p),
                    repr(r.seconds),
                ])


def sgd_step(weights: NetworkWeights, grads, lr: float,
             momentum: float = 0.0, velocity=None) -> NetworkWeights:
    """Plain descent w <- w - lr*g, optionally with classical momentum.

    Updates the weights in place and returns them; `velocity` (same
    structure as grads) is mutated when momentum is on.
    """
    if len(grads) != len(weights.params):
        raise ShapeError(f"{len(grads)} gradient sets for {len(weights.params)} layers")
    for i, (p, (gk, gb)) in enumerate(zip(weights.params, grads)):
        if gk.shape != p.kernel.shape or gb.shape != p.bias.shape:
            raise ShapeError(f"layer {i}: gradient shape mismatch")
        if momentum > 0.0:
            velocity[i][0] = momentum * velocity[i][0] + gk
            velocity[i][1] = momentum * velocity[i][1] + gb
            gk, gb = velocity[i]
        weights.params[i] = ConvLayerParams(p.kernel - lr * gk, p.bias - lr * gb)
    return weights


def _prior_patch(prior, pair: PatchPair, channels: int):
    size = pair.photo_patch.shape[1]
    if prior is None:
        return np.zeros((channels, size, size))
    if (pair.y + size > prior.shape[1]) or (pair.x + size > prior.shape[2]):
        raise ShapeError(
            f"prior {prior.shape} does not cover the patch at ({pair.y}, {pair.x})"
        )
    return prior[:, pair.y:pair.y + size, pair.x:pair.x + size]


def _bfcn_input(pair: PatchPair, prior):
    return np.concatenate([pair.photo_patch, _prior_patch(prior, pair, 1)])


def train_bfcn(pairs, prior, config: TrainConfig, spec: NetworkSpec | None = None):
    """Train the branched generation network on labeled patch pairs.

    `prior` is the mean training sketch at source-image resolution (the
    pair's recorded location selects the matching window) or None for a
    zero prior channel. Returns (weights, report).
    """
    faces = [p for p in pairs if p.region == FACE]
    hairs = [p for p in pairs if p.region == HAIR]
    if not faces:
        raise ValueError("no face patch pairs: the structural branch has nothing to train on")
    if not hairs:
        raise ValueError("no hair patch pairs: the textural branch has nothing to train on")
    if spec is None:
        spec = networks.bfcn_spec(in_channels=pairs[0].photo_patch.shape[0] + 1)

    weights = networks.init_weights(spec, config.seed)
    velocity = networks.zero_grads(weights) if config.momentum > 0 else None
    rng = np.random.default_rng(config.seed)
    report = TrainReport()

    half = config.batch_size // 2
    out_size = config.patch_size - networks.BFCN_SHRINK
    steps = max(1, math.ceil(max(len(faces), len(hairs)) / half))

    for epoch in range(config.epochs_bfcn):
        t0 = time.perf_counter()
        f_order = rng.permutation(len(faces))
        h_order = rng.permutation(len(hairs))
        sum_s = sum_t = 0.0
        for step in range(steps):
            grads = networks.zero_grads(weights)
            batch_s = batch_t = 0.0
            for i in range(half):
                pair = faces[f_order[(step * half + i) % len(faces)]]
                x = _bfcn_input(pair, prior)
                s, t, caches = networks.bfcn_forward_train(x, weights)
                target = ops.center_crop(pair.sketch_patch, out_size, out_size)
                term = losses.mse(s, target)
                batch_s += term.value
                part = networks.bfcn_backward(caches, weights, term.grad / half,
                                              np.zeros_like(t))
                for g, p in zip(grads, part):
                    g[0] += p[0]
                    g[1] += p[1]
            for i in range(half):
                pair = hairs[h_order[(step * half + i) % len(hairs)]]
                x = _bfcn_input(pair, prior)
                s, t, caches = networks.bfcn_forward_train(x, weights)
                target = ops.center_crop(pair.sketch_patch, out_size, out_size)
                term = losses.textural_loss(t, target, beta=config.beta)
                batch_t += term.value
                part = networks.bfcn_backward(caches, weights, np.zeros_like(s),
                                              config.alpha * term.grad / half)
                for g, p in zip(grads, part):
                    g[0] += p[0]
                    g[1] += p[1]
            sgd_step(weights, grads, config.lr_bfcn, config.momentum, velocity)
            sum_s += batch_s / half
            sum_t += batch_t / half
        loss_s = sum_s / steps
        loss_t = sum_t / steps
        report.records.append(EpochRecord(
            epoch + 1, loss_s, loss_t, loss_s + config.alpha * loss_t, None,
            time.perf_counter() - t0,
        ))
        weights.epoch = epoch + 1
    return weights, report


def train_pnet(images, prior, config: TrainConfig, spec: NetworkSpec | None = None):
    """Train the parsing network on (photo, label map) examples.

    Labels are (H, W) integer maps in {1, 2, 3} at the network's output
    resolution. `prior` is the mean one-hot label map at input
    resolution (3 channels) or None for zero prior channels. Returns
    (weights, report).
    """
    if not images:
        raise ValueError("no training images for the parsing network")
    if spec is None:
        spec = networks.pnet_spec(in_channels=images[0][0].shape[0] + 3)

    weights = networks.init_weights(spec, config.seed)
    velocity = networks.zero_grads(weights) if config.momentum > 0 else None
    rng = np.random.default_rng(config.seed)
    report = TrainReport()

    def net_input(photo):
        if prior is None:
            pad = np.zeros((3,) + photo.shape[1:])
        else:
            if prior.shape[1:] != photo.shape[1:]:
                raise ShapeError(
                    f"prior {prior.shape} does not match photo {photo.shape}"
                )
            pad = prior
        return np.concatenate([photo, pad])

    # fail on label/output resolution mismatch before any training work
    probe_logits, _ = networks.pnet_logits(net_input(ops.as_tensor(images[0][0])), weights)
    for photo, labels in images:
        labels = np.asarray(labels)
        if labels.shape != probe_logits.shape[1:]:
            raise ShapeError(
                f"label map {labels.shape} does not match parsing output "
                f"{probe_logits.shape[1:]}"
            )

    for epoch in range(config.epochs_pnet):
        t0 = time.perf_counter()
        order = rng.permutation(len(images))
        total = 0.0
        for idx in order:
            photo, labels = images[idx]
            logits, cache = networks.pnet_logits(net_input(ops.as_tensor(photo)), weights)
            term = losses.softmax_parsing_loss(logits, np.asarray(labels))
            total += term.value
            grads = networks.pnet_backward(cache, weights, term.grad)
            sgd_step(weights, grads, config.lr_pnet, config.momentum, velocity)
        report.records.append(EpochRecord(
            epoch + 1, None, None, None, total / len(images),
            time.perf_counter() - t0,
        ))
        weights.epoch = epoch + 1
    return weights, report


# ---------------------------------------------------------------------------
# gradient checking

@dataclass(frozen=True)
class GradCheckReport:
    target: str
    max_rel_err: float
    location: str
    epsilon: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < GRADCHECK_TOLERANCE


def _central_diff_worst(loss_fn, checks, epsilon):
    """Compare analytic gradient arrays against central differences.

    `checks` is a list of (name, array, analytic_grad); arrays are
    perturbed in place and restored. Returns (worst error, location).
    """
    worst, where = 0.0, "none"
    for name, arr, analytic in checks:
        flat = arr.reshape(-1)
        gf = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = loss_fn()
            flat[i] = orig - epsilon
            lo = loss_fn()
            flat[i] = orig
            num = (hi - lo) / (2.0 * epsilon)
            err = abs(gf[i] - num) / max(abs(gf[i]) + abs(num), 1e-6)
            if err > worst:
                worst, where = err, f"{name}[{i}]"
    return worst, where


def _random_o1_weights(spec, rng, scale=0.6):
    params = []
    for d in spec.conv_layers():
        shape = (d.out_channels, d.in_channels, d.kernel_size, d.kernel_size)
        params.append(ConvLayerParams(rng.normal(0.0, scale, shape),
                                      rng.normal(0.0, 0.1, d.out_channels)))
    return NetworkWeights(spec, params)


def _kink_margin(caches):
    margin = np.inf
    for cache in caches:
        for layer, x in cache:
            if layer.kind == networks.RELU:
                margin = min(margin, float(np.abs(x).min()))
    return margin


def gradient_check(target: str, seed: int = 0, epsilon: float = 1e-5) -> GradCheckReport:
    """Run the finite-difference harness for one named target.

    Inputs are constructed away from sort ties and ReLU kinks (the
    analytic gradient is one-sided there and central differences are
    meaningless); for the network targets the construction is retried on
    fresh seeds until every preactivation clears the probe distance.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    if target not in GRADCHECK_TARGETS:
        raise ValueError(f"unknown gradient-check target {target!r}")
    rng = np.random.default_rng(seed)

    if target == "mse":
        p = rng.normal(size=(1, 4, 4))
        t = rng.normal(size=(1, 4, 4))
        out = losses.mse(p, t)
        worst, where = _central_diff_worst(
            lambda: losses.mse(p, t).value, [("pred", p, out.grad)], epsilon)
    elif target == "smmse":
        p = (rng.permutation(16) / 4.0).reshape(1, 4, 4)
        t = rng.normal(size=(1, 4, 4))
        out = losses.sm_mse(p, t)
        worst, where = _central_diff_worst(
            lambda: losses.sm_mse(p, t).value, [("pred", p, out.grad)], epsilon)
    elif target == "softmax":
        logits = rng.normal(size=(3, 4, 4))
        labels = rng.integers(1, 4, size=(4, 4))
        out = losses.softmax_parsing_loss(logits, labels)
        worst, where = _central_diff_worst(
            lambda: losses.softmax_parsing_loss(logits, labels).value,
            [("logits", logits, out.grad)], epsilon)
    elif target == "conv":
        x = rng.normal(size=(2, 6, 7))
        params = ConvLayerParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        g = rng.normal(size=(3, 4, 5))
        gx, gk, gb = ops.conv2d_backward(x, params, g)
        worst, where = _central_diff_worst(
            lambda: float((ops.conv2d(x, params) * g).sum()),
            [("input", x, gx), ("kernel", params.kernel, gk), ("bias", params.bias, gb)],
            epsilon)
    elif target == "relu":
        x = rng.normal(size=(2, 5, 5))
        x[np.abs(x) < 0.05] = 0.3
        g = rng.normal(size=(2, 5, 5))
        worst, where = _central_diff_worst(
            lambda: float((ops.relu(x) * g).sum()),
            [("input", x, ops.relu_backward(x, g))], epsilon)
    elif target == "maxpool":
        x = (rng.permutation(48) / 48.0).reshape(1, 8, 6)
        g = rng.normal(size=(1, 4, 3))
        worst, where = _central_diff_worst(
            lambda: float((ops.maxpool2x2(x) * g).sum()),
            [("input", x, ops.maxpool2x2_backward(x, g))], epsilon)
    elif target == "lrn":
        x = rng.normal(size=(5, 3, 4))
        g = rng.normal(size=(5, 3, 4))
        worst, where = _central_diff_worst(
            lambda: float((ops.lrn(x) * g).sum()),
            [("input", x, ops.lrn_backward(x, g))], epsilon)
    elif target == "bfcn-tiny":
        spec = networks.bfcn_spec(in_channels=2, trunk_widths=(2, 2, 2),
                                  branch_widths=(2, 2, 1))
        for attempt in range(20):
            wrng = np.random.default_rng(seed + attempt)
            w = _random_o1_weights(spec, wrng)
            x = wrng.uniform(size=(2, 16, 16))
            _, _, caches = networks.bfcn_forward_train(x, w)
            if _kink_margin([caches[0], *caches[1]]) > 100 * epsilon:
                break
        gs = wrng.normal(size=(1, 4, 4))
        gt = wrng.normal(size=(1, 4, 4))

        def loss_fn():
            s, t = networks.bfcn_forward(x, w)
            return float((s * gs).sum() + (t * gt).sum())

        _, _, caches = networks.bfcn_forward_train(x, w)
        grads = networks.bfcn_backward(caches, w, gs, gt)
        checks = []
        for li, p in enumerate(w.params):
            checks.append((f"kernel{li}", p.kernel, grads[li][0]))
            checks.append((f"bias{li}", p.bias, grads[li][1]))
        worst, where = _central_diff_worst(loss_fn, checks, epsilon)
    else:  # pnet-tiny
        spec = networks.pnet_spec(in_channels=4, widths=(2, 2, 2, 2, 2, 2, 2, 3),
                                  kernels=(3, 3, 3, 3, 3, 3, 3, 1))
        for attempt in range(20):
            wrng = np.random.default_rng(seed + attempt)
            w = _random_o1_weights(spec, wrng, scale=0.4)
            x = wrng.uniform(size=(4, 8, 8))
            _, cache = networks.pnet_logits(x, w)
            if _kink_margin([cache]) > 100 * epsilon:
                break
        labels = wrng.integers(1, 4, size=(4, 4))

        def loss_fn():
            logits, _ = networks.pnet_logits(x, w)
            return losses.softmax_parsing_loss(logits, labels).value

        logits, cache = networks.pnet_logits(x, w)
        term = losses.softmax_parsing_loss(logits, labels)
        grads = networks.pnet_backward(cache, w, term.grad)
        checks = []
        for li, p in enumerate(w.params):
            checks.append((f"kernel{li}", p.kernel, grads[li][0]))
            checks.append((f"bias{li}", p.bias, grads[li][1]))
        worst, where = _central_diff_worst(loss_fn, checks, epsilon)

    return GradCheckReport(target, worst, where, epsilon)
