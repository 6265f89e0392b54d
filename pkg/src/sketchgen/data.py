"""Dataset preparation between aligned images and training batches.

Covers the steps the training loops rely on: overlapping patch
extraction with region labels taken from a parsing map, the edge-based
structural alignment filter (Sobel magnitudes compared with SSIM),
nonparametric prior construction, and the lighting augmentation.

Pixel classes are 1-based throughout: 1 face, 2 hair, 3 background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sketchgen import ops
from sketchgen.ops import ShapeError, as_tensor

FACE, HAIR, BACKGROUND = 1, 2, 3
REGION_NAMES = {FACE: "face", HAIR: "hair", BACKGROUND: "background"}

# largest Sobel magnitude a unit-range image can produce: |gx| and |gy|
# each peak at 4, so the joint magnitude is bounded by 4*sqrt(2)
EDGE_NORM = 4.0 * math.sqrt(2.0)

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

_SOBEL = np.array(
    [
        [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
        [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
    ]
)


@dataclass(frozen=True)
class ParsingMap:
    """Per-pixel probability simplex over {face, hair, background}.

    Each field is a single-channel (1, H, W) tensor in [0, 1]; the three
    channels sum to 1 per pixel within 1e-6.
    """

    p_face: np.ndarray
    p_hair: np.ndarray
    p_background: np.ndarray

    def __post_init__(self):
        for name in ("p_face", "p_hair", "p_background"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        f, h, b = self.p_face, self.p_hair, self.p_background
        if not (f.shape == h.shape == b.shape) or f.shape[0] != 1:
            raise ShapeError(
                f"parsing channels must be congruent single-channel maps, got "
                f"{f.shape}, {h.shape}, {b.shape}"
            )
        total = f + h + b
        if np.abs(total - 1.0).max() > 1e-6:
            raise ValueError("parsing probabilities must sum to 1 per pixel within 1e-6")
        lo = min(f.min(), h.min(), b.min())
        hi = max(f.max(), h.max(), b.max())
        if lo < -1e-9 or hi > 1.0 + 1e-9:
            raise ValueError("parsing probabilities must lie in [0, 1]")

    @classmethod
    def from_probs(cls, probs) -> "ParsingMap":
        """Build from a (3, H, W) probability tensor, channel order face/hair/background."""
        probs = np.asarray(probs, dtype=np.float64)
        if probs.ndim != 3 or probs.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W) probabilities, got shape {probs.shape}")
        return cls(probs[0:1], probs[1:2], probs[2:3])

    @classmethod
    def from_labels(cls, labels) -> "ParsingMap":
        """One-hot map from an (H, W) integer label map with values in {1, 2, 3}."""
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ShapeError(f"label map must be 2-D, got shape {labels.shape}")
        if labels.min() < FACE or labels.max() > BACKGROUND:
            raise ValueError("labels must lie in {1, 2, 3}")
        onehot = np.stack([(labels == c).astype(np.float64) for c in (FACE, HAIR, BACKGROUND)])
        return cls.from_probs(onehot)

    def stacked(self) -> np.ndarray:
        """(3, H, W) tensor, channel order face/hair/background."""
        return np.concatenate([self.p_face, self.p_hair, self.p_background])

    def argmax_labels(self) -> np.ndarray:
        """(H, W) map of the most likely class per pixel; ties go to the
        lowest class index (face before hair before background)."""
        return self.stacked().argmax(axis=0).astype(np.int64) + 1

    def resized(self, out_h: int, out_w: int) -> "ParsingMap":
        """Bilinear resize, then renormalize back onto the simplex."""
        probs = ops.bilinear_resize(self.stacked(), out_h, out_w)
        probs = np.clip(probs, 0.0, None)
        return ParsingMap.from_probs(probs / probs.sum(axis=0, keepdims=True))

    @property
    def shape(self):
        return self.p_face.shape[1:]


@dataclass(frozen=True)
class PatchPair:
    """One aligned photo/sketch training patch with its region label.

    `y`, `x` locate the patch's top-left corner in the source image so
    the prior channel can be cropped at the same position later.
    """

    photo_patch: np.ndarray
    sketch_patch: np.ndarray
    region: int
    alignment_score: float
    y: int = 0
    x: int = 0

    def __post_init__(self):
        object.__setattr__(self, "photo_patch", as_tensor(self.photo_patch))
        object.__setattr__(self, "sketch_patch", as_tensor(self.sketch_patch))
        if self.photo_patch.shape[1:] != self.sketch_patch.shape[1:]:
            raise ShapeError(
                f"photo patch {self.photo_patch.shape} and sketch patch "
                f"{self.sketch_patch.shape} differ spatially"
            )
        if self.sketch_patch.shape[0] != 1:
            raise ShapeError("sketch patch must be single-channel")
        if self.region not in (FACE, HAIR):
            raise ValueError(f"patch region must be face ({FACE}) or hair ({HAIR})")
        if not -1.0 - 1e-9 <= self.alignment_score <= 1.0 + 1e-9:
            raise ValueError(f"alignment score {self.alignment_score} outside [-1, 1]")


def luminance(img: np.ndarray) -> np.ndarray:
    """Single-channel luminance of a 1- or 3-channel image tensor."""
    img = as_tensor(img)
    if img.shape[0] == 1:
        return img
    if img.shape[0] == 3:
        return np.tensordot(_LUMA_WEIGHTS, img, axes=1)[np.newaxis]
    raise ShapeError(f"expected 1 or 3 channels, got shape {img.shape}")


def sobel_edges(img: np.ndarray) -> np.ndarray:
    """Gradient magnitude of a single-channel image via 3x3 Sobel kernels.

    Borders are replicate-padded so the output keeps the input size.
    """
    img = as_tensor(img)
    if img.shape[0] != 1:
        raise ShapeError(f"expected a single-channel image, got shape {img.shape}")
    if img.shape[1] < 3 or img.shape[2] < 3:
        raise ShapeError(f"image {img.shape} too small for a 3x3 operator")
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    params = ops.ConvLayerParams(_SOBEL[:, np.newaxis], np.zeros(2))
    g = ops.conv2d(padded, params)
    return np.sqrt(g[0] * g[0] + g[1] * g[1])[np.newaxis]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Global-statistics structural similarity of two unit-range images.

    Uses a single set of population moments over the whole image rather
    than sliding windows, with the usual stabilizers for unit dynamic
    range. Result lies in [-1, 1]; identical inputs give exactly 1.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shapes {a.shape} and {b.shape} differ")
    for name, img in (("first", a), ("second", b)):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} image has values outside [0, 1]")
    mu_a, mu_b = a.mean(), b.mean()
    var_a = np.mean((a - mu_a) ** 2)
    var_b = np.mean((b - mu_b) ** 2)
    cov = np.mean((a - mu_a) * (b - mu_b))
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return float(num / den)


def alignment_score(photo_patch: np.ndarray, sketch_patch: np.ndarray) -> float:
    """SSIM between the normalized Sobel edge maps of a patch pair."""
    pe = sobel_edges(luminance(photo_patch)) / EDGE_NORM
    se = sobel_edges(luminance(sketch_patch)) / EDGE_NORM
    return ssim(pe, se)


def alignment_filter(pair: PatchPair, threshold: float = 0.6) -> bool:
    """Keep a pair iff its recorded edge-SSIM score exceeds the threshold."""
    return pair.alignment_score > threshold


def extract_patches(photo: np.ndarray, sketch: np.ndarray, parsing: ParsingMap,
                    size: int = 32, stride: int = 16, ssim_threshold: float = 0.6,
                    filter_structural: bool = True) -> list[PatchPair]:
    """Slide a regular grid over an aligned photo/sketch pair.

    Each patch is labeled face or hair by the majority argmax class of
    the parsing pixels under it; background-majority patches are
    dropped. Face pairs additionally pass the alignment filter unless
    `filter_structural` is off (every pair still records its score).
    Output order is row-major over grid positions, so the result is
    deterministic.
    """
    photo = as_tensor(photo)
    sketch = as_tensor(sketch)
    if photo.shape[1:] != sketch.shape[1:]:
        raise ShapeError(f"photo {photo.shape} and sketch {sketch.shape} differ spatially")
    if parsing.shape != photo.shape[1:]:
        raise ShapeError(
            f"parsing map {parsing.shape} does not cover image {photo.shape[1:]}"
        )
    h, w = photo.shape[1:]
    if size > h or size > w:
        raise ShapeError(f"patch size {size} exceeds image size {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")

    labels = parsing.argmax_labels()
    pairs = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            window = labels[y:y + size, x:x + size]
            counts = np.bincount(window.ravel(), minlength=BACKGROUND + 1)[1:]
            region = int(counts.argmax()) + 1
            if region == BACKGROUND:
                continue
            pp = photo[:, y:y + size, x:x + size]
            sp = sketch[:, y:y + size, x:x + size]
            pair = PatchPair(pp, sp, region, alignment_score(pp, sp), y=y, x=x)
            if region == FACE and filter_structural and not alignment_filter(pair, ssim_threshold):
                continue
            pairs.append(pair)
    return pairs


def build_prior(sketches: list) -> np.ndarray:
    """Pixel-wise mean of equally shaped tensors.

    Serves as the nonparametric prior channel: the mean training sketch
    for generation, or the mean one-hot label map for parsing.
    """
    if not sketches:
        raise ValueError("cannot build a prior from an empty list")
    tensors = [as_tensor(s) for s in sketches]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"prior inputs disagree on shape: {shape} vs {t.shape}")
    return np.mean(tensors, axis=0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """(3, H, W) RGB in [0,1] to HSV via the hexcone model, H in [0,1)."""
    rgb = as_tensor(rgb)
    if rgb.shape[0] != 3:
        raise ShapeError(f"expected RGB, got shape {rgb.shape}")
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    safe = np.where(delta == 0.0, 1.0, delta)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h6 = np.select([r == maxc, g == maxc], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc)
    h = np.where(delta == 0.0, 0.0, (h6 / 6.0) % 1.0)
    s = np.where(maxc == 0.0, 0.0, delta / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([h, s, maxc])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv on (3, H, W) tensors."""
    hsv = as_tensor(hsv)
    if hsv.shape[0] != 3:
        raise ShapeError(f"expected HSV, got shape {hsv.shape}")
    h, s, v = hsv
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def hsv_value_augment(photo: np.ndarray, factor: float | None = None,
                      rng: np.random.Generator | None = None,
                      lo: float = 0.625, hi: float = 1.125) -> np.ndarray:
    """Scale image brightness by a factor, drawn uniformly when not given.

    RGB images round-trip through HSV so hue and saturation are
    untouched; single-channel images scale directly (their value channel
    is the pixel itself). The result is clamped to [0, 1].
    """
    photo = as_tensor(photo)
    if factor is None:
        if rng is None:
            raise ValueError("either a factor or an rng must be supplied")
        factor = float(rng.uniform(lo, hi))
    if photo.shape[0] == 1:
        return np.clip(photo * factor, 0.0, 1.0)
    hsv = rgb_to_hsv(photo)
    hsv[2] = np.clip(hsv[2] * factor, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
