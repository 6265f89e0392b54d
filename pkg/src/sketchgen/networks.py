"""The two fixed architectures, their execution, and weight serialization.

The generation network is a branched stack: three shared convolutions
feed two sibling branches whose final single-channel maps are the
structural and textural sketches. Every convolution is unpadded, so the
output shrinks by exactly 12 pixels per spatial axis regardless of input
size; a 32x32 training patch maps to a 20x20 prediction and a 250x200
photo to a 238x188 sketch.

The parsing network is eight convolutions with ReLUs, the first three
each followed by a pooling stage and cross-channel normalization. Its
convolutions preserve size through explicit zero padding and only the
first pooling stage halves resolution, so a 200x156 input yields 100x78
probability maps over face/hair/background.

Weights are stored in a fixed little-endian binary format (magic
"SKWT"); the file embeds a hash of the owning architecture so weights
cannot be loaded into a mismatched network.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from sketchgen import ops
from sketchgen.data import ParsingMap
from sketchgen.losses import softmax_probs
from sketchgen.ops import ConvLayerParams, ShapeError

WEIGHT_MAGIC = b"SKWT"
WEIGHT_VERSION = 1

CONV, RELU, MAXPOOL_HALF, MAXPOOL_SAME, LRN = (
    "conv", "relu", "maxpool_half", "maxpool_same", "lrn",
)
_KINDS = (CONV, RELU, MAXPOOL_HALF, MAXPOOL_SAME, LRN)

INIT_STD = 0.01


class WeightFormatError(ValueError):
    """A weight file is malformed or truncated."""


class SpecMismatchError(WeightFormatError):
    """A weight file belongs to a different architecture."""


@dataclass(frozen=True)
class LayerDef:
    """One stage of a network stack.

    Only conv layers carry parameters; `pad` zeros are added around the
    input before the valid convolution, so pad = (kernel_size - 1) // 2
    makes the layer size-preserving.
    """

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    pad: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError(f"conv layer needs positive channel counts, got {self}")
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(f"conv kernel size must be odd and positive, got {self}")
            if self.pad < 0:
                raise ValueError(f"negative padding in {self}")


def conv(in_ch: int, out_ch: int, k: int, pad: int = 0) -> LayerDef:
    return LayerDef(CONV, in_ch, out_ch, k, pad)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer stack with optional sibling branches after the trunk."""

    name: str
    trunk: tuple
    branches: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "branches", tuple(tuple(b) for b in self.branches))
        trunk_out = None
        for seq in (self.trunk, *self.branches):
            chans = trunk_out
            for layer in seq:
                if layer.kind != CONV:
                    continue
                if chans is not None and layer.in_channels != chans:
                    raise ShapeError(
                        f"{self.name}: conv expects {layer.in_channels} channels "
                        f"but receives {chans}"
                    )
                chans = layer.out_channels
            if trunk_out is None:
                trunk_out = chans

    def conv_layers(self) -> list:
        """All conv layers in serialization order: trunk, then each branch."""
        out = [l for l in self.trunk if l.kind == CONV]
        for branch in self.branches:
            out.extend(l for l in branch if l.kind == CONV)
        return out

    def in_channels(self) -> int:
        for layer in self.trunk:
            if layer.kind == CONV:
                return layer.in_channels
        raise ShapeError(f"{self.name} has no conv layers")

    def canonical(self) -> str:
        def seq(layers):
            return ",".join(
                f"{l.kind}:{l.in_channels}:{l.out_channels}:{l.kernel_size}:{l.pad}"
                for l in layers
            )

        parts = [self.name, seq(self.trunk)]
        parts.extend(seq(b) for b in self.branches)
        return "|".join(parts)

    def spec_hash(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")


def bfcn_spec(in_channels: int = 2, trunk_widths=(32, 32, 32),
              branch_widths=(32, 16, 1)) -> NetworkSpec:
    """Branched generation network.

    Trunk kernels are 5x5, 5x5, 1x1; each branch runs 1x1, 3x3, 3x3 and
    ends without a ReLU because the sketch map is a regression target.
    The final branch width must be 1.
    """
    t1, t2, t3 = trunk_widths
    b1, b2, b3 = branch_widths
    if b3 != 1:
        raise ShapeError(f"sketch output must be single-channel, got branch widths {branch_widths}")
    trunk = (
        conv(in_channels, t1, 5), LayerDef(RELU),
        conv(t1, t2, 5), LayerDef(RELU),
        conv(t2, t3, 1), LayerDef(RELU),
    )
    branch = (
        conv(t3, b1, 1), LayerDef(RELU),
        conv(b1, b2, 3), LayerDef(RELU),
        conv(b2, b3, 3),
    )
    return NetworkSpec("bfcn", trunk, (branch, branch))


# spatial shrink of the generation network: 4+4+0 from the trunk plus
# 0+2+2 from a branch
BFCN_SHRINK = 12


def pnet_spec(in_channels: int = 4, widths=(16, 16, 32, 32, 32, 64, 64, 3),
              kernels=(5, 5, 5, 3, 3, 3, 3, 1)) -> NetworkSpec:
    """Face parsing network.

    Eight size-preserving convolutions; the first three are each
    followed by pooling and cross-channel normalization, and only the
    first pooling stage halves resolution (the others use stride 1).
    The last convolution emits the 3 class logits with no ReLU.
    """
    if len(widths) != 8 or len(kernels) != 8:
        raise ShapeError("parsing network takes exactly 8 conv widths and kernel sizes")
    if widths[-1] != 3:
        raise ShapeError(f"parsing output must have 3 channels, got widths {widths}")
    layers = []
    chans = in_channels
    for i, (w, k) in enumerate(zip(widths, kernels)):
        layers.append(conv(chans, w, k, pad=(k - 1) // 2))
        if i < 7:
            layers.append(LayerDef(RELU))
        if i < 3:
            layers.append(LayerDef(MAXPOOL_HALF if i == 0 else MAXPOOL_SAME))
            layers.append(LayerDef(LRN))
        chans = w
    return NetworkSpec("pnet", tuple(layers))


@dataclass
class NetworkWeights:
    """Per-conv-layer parameters for one NetworkSpec, in serialization order."""

    spec: NetworkSpec
    params: list
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        defs = self.spec.conv_layers()
        if len(self.params) != len(defs):
            raise ShapeError(
                f"{len(self.params)} parameter sets for {len(defs)} conv layers"
            )
        for i, (p, d) in enumerate(zip(self.params, defs)):
            want = (d.out_channels, d.in_channels, d.kernel_size, d.kernel_size)
            if p.kernel.shape != want:
                raise ShapeError(
                    f"layer {i}: kernel shape {p.kernel.shape} does not match spec {want}"
                )


def init_weights(spec: NetworkSpec, seed: int) -> NetworkWeights:
    """Gaussian kernels (std 0.01), zero biases, deterministic in the seed.

    Draws are quantized to the float32 grid so that saving and reloading
    freshly initialized weights is a bitwise no-op.
    """
    rng = np.random.default_rng(seed)
    params = []
    for d in spec.conv_layers():
        shape = (d.out_channels, d.in_channels, d.kernel_size, d.kernel_size)
        kernel = rng.normal(0.0, INIT_STD, shape).astype(np.float32).astype(np.float64)
        params.append(ConvLayerParams(kernel, np.zeros(d.out_channels)))
    return NetworkWeights(spec, params, seed=seed)


# ---------------------------------------------------------------------------
# execution

def _run_layers(x, layers, params, start):
    """Execute a layer sequence; returns (output, cache, next param index).

    The cache records (layer, layer input) pairs — for conv layers the
    padded input — which is exactly what each backward pass needs.
    """
    cache = []
    pi = start
    for layer in layers:
        if layer.kind == CONV:
            xp = ops.zero_pad(x, layer.pad)
            cache.append((layer, xp))
            x = ops.conv2d(xp, params[pi])
            pi += 1
        elif layer.kind == RELU:
            cache.append((layer, x))
            x = ops.relu(x)
        elif layer.kind == MAXPOOL_HALF:
            cache.append((layer, x))
            x = ops.maxpool2x2(x)
        elif layer.kind == MAXPOOL_SAME:
            cache.append((layer, x))
            x = ops.maxpool2_same(x)
        else:
            cache.append((layer, x))
            x = ops.lrn(x)
    return x, cache, pi


def _backward_layers(cache, params, end, grad, grads):
    """Backpropagate through a cached layer sequence.

    `end` is the param index one past the sequence's last conv layer;
    kernel/bias gradients accumulate into `grads` (a list of
    [grad_kernel, grad_bias] pairs aligned with `params`).
    """
    pi = end
    for layer, x in reversed(cache):
        if layer.kind == CONV:
            pi -= 1
            gx, gk, gb = ops.conv2d_backward(x, params[pi], grad)
            grads[pi][0] += gk
            grads[pi][1] += gb
            grad = ops.zero_pad_backward(gx, layer.pad)
        elif layer.kind == RELU:
            grad = ops.relu_backward(x, grad)
        elif layer.kind == MAXPOOL_HALF:
            grad = ops.maxpool2x2_backward(x, grad)
        elif layer.kind == MAXPOOL_SAME:
            grad = ops.maxpool2_same_backward(x, grad)
        else:
            grad = ops.lrn_backward(x, grad)
    return grad


def _check_input(x, spec):
    x = ops.as_tensor(x)
    want = spec.in_channels()
    if x.shape[0] != want:
        raise ShapeError(
            f"{spec.name} expects {want} input channels, got shape {x.shape}"
        )
    return x


def zero_grads(weights: NetworkWeights) -> list:
    return [[np.zeros_like(p.kernel), np.zeros_like(p.bias)] for p in weights.params]


def bfcn_forward(x, weights: NetworkWeights):
    """Run the branched network; returns (structural, textural) maps.

    The shared trunk is computed exactly once and both branches read the
    same activation.
    """
    s, t, _ = bfcn_forward_train(x, weights)[:3]
    return s, t


def bfcn_forward_train(x, weights: NetworkWeights):
    """Forward pass keeping caches: (structural, textural, caches)."""
    spec = weights.spec
    if not spec.branches:
        raise ShapeError(f"{spec.name} is not a branched network")
    x = _check_input(x, spec)
    if x.shape[1] <= BFCN_SHRINK or x.shape[2] <= BFCN_SHRINK:
        raise ShapeError(
            f"input {x.shape} smaller than the {BFCN_SHRINK + 1}x{BFCN_SHRINK + 1} "
            f"receptive field"
        )
    trunk_out, trunk_cache, pi = _run_layers(x, spec.trunk, weights.params, 0)
    outs, caches, starts = [], [], []
    for branch in spec.branches:
        starts.append(pi)
        out, cache, pi = _run_layers(trunk_out, branch, weights.params, pi)
        outs.append(out)
        caches.append(cache)
    return outs[0], outs[1], (trunk_cache, caches, starts, pi)


def bfcn_backward(caches, weights: NetworkWeights, grad_struct, grad_text):
    """Gradients for every parameter given per-branch output gradients.

    Branch gradients meet at the trunk output, where they sum before
    flowing through the shared layers.
    """
    trunk_cache, branch_caches, starts, _ = caches
    grads = zero_grads(weights)
    trunk_grad = None
    branch_ends = starts[1:] + [len(weights.params)]
    for cache, grad, end in zip(branch_caches, (grad_struct, grad_text), branch_ends):
        g = _backward_layers(cache, weights.params, end, grad, grads)
        trunk_grad = g if trunk_grad is None else trunk_grad + g
    _backward_layers(trunk_cache, weights.params, starts[0], trunk_grad, grads)
    return grads


def unshared_bfcn_forward(x, weights: NetworkWeights):
    """Reference forward that recomputes the trunk once per branch.

    Arithmetic is identical to bfcn_forward, so outputs are bitwise
    equal; only the duplicated trunk work differs. Used to measure what
    parameter sharing saves.
    """
    spec = weights.spec
    x = _check_input(x, spec)
    outs = []
    start = sum(1 for l in spec.trunk if l.kind == CONV)
    for branch in spec.branches:
        trunk_out, _, _ = _run_layers(x, spec.trunk, weights.params, 0)
        out, _, start = _run_layers(trunk_out, branch, weights.params, start)
        outs.append(out)
    return tuple(outs)


def pnet_logits(x, weights: NetworkWeights):
    """Forward pass to class logits, keeping caches for backprop."""
    spec = weights.spec
    if spec.branches:
        raise ShapeError(f"{spec.name} is a branched network, not a parsing stack")
    x = _check_input(x, spec)
    out, cache, _ = _run_layers(x, spec.trunk, weights.params, 0)
    return out, cache


def pnet_backward(cache, weights: NetworkWeights, grad_logits):
    grads = zero_grads(weights)
    _backward_layers(cache, weights.params, len(weights.params), grad_logits, grads)
    return grads


def pnet_forward(x, weights: NetworkWeights) -> ParsingMap:
    """Probability maps over face/hair/background at half resolution."""
    logits, _ = pnet_logits(x, weights)
    return ParsingMap.from_probs(softmax_probs(logits))


# ---------------------------------------------------------------------------
# weight files

def save_weights(weights: NetworkWeights, path) -> None:
    """Write the fixed binary format; values are stored as float32.

    Layout, all little-endian: magic "SKWT", version u32, spec hash u64,
    layer count u32, then per conv layer its dims as 4 u32
    (out, in, kh, kw) followed by the kernel and bias as float32.
    """
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += struct.pack("<IQI", WEIGHT_VERSION, weights.spec.spec_hash(), len(weights.params))
    for p in weights.params:
        blob += struct.pack("<4I", *p.kernel.shape)
        blob += p.kernel.astype("<f4").tobytes()
        blob += p.bias.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_weights(path, spec: NetworkSpec) -> NetworkWeights:
    """Read a weight file back; the embedded hash must match `spec`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFormatError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: bad magic, not a weight file")
    version, spec_hash, count = struct.unpack("<IQI", take(16))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    if spec_hash != spec.spec_hash():
        raise SpecMismatchError(
            f"{path}: weights belong to a different architecture "
            f"(hash {spec_hash:#018x}, expected {spec.spec_hash():#018x})"
        )
    defs = spec.conv_layers()
    if count != len(defs):
        raise SpecMismatchError(f"{path}: {count} layers for a {len(defs)}-layer spec")
    params = []
    for i, d in enumerate(defs):
        dims = struct.unpack("<4I", take(16))
        want = (d.out_channels, d.in_channels, d.kernel_size, d.kernel_size)
        if dims != want:
            raise SpecMismatchError(f"{path}: layer {i} dims {dims}, spec wants {want}")
        n_k = dims[0] * dims[1] * dims[2] * dims[3]
        kernel = np.frombuffer(take(4 * n_k), dtype="<f4").reshape(dims).astype(np.float64)
        bias = np.frombuffer(take(4 * dims[0]), dtype="<f4").astype(np.float64)
        params.append(ConvLayerParams(kernel, bias))
    if pos != len(blob):
        raise WeightFormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return NetworkWeights(spec, params)
