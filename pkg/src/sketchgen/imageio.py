"""Bit-exact binary PGM/PPM codecs, label-map files, and dataset manifests.

Grayscale images travel as P5 and color as P6, both maxval 255. Pixel
floats in [0, 1] map to bytes by round-to-nearest, so byte -> float ->
byte is the identity and rewriting a file reproduces it bit for bit.
Label maps reuse the P5 container with raw class ids {1, 2, 3} as the
stored bytes. PNG import is optional and needs Pillow.

Manifests are plain text: one example per line,
"photo_path<TAB>sketch_path<TAB>label_path", the label column optional.
Relative paths resolve against the manifest's own directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from sketchgen.data import BACKGROUND, FACE, HAIR
from sketchgen.ops import as_tensor


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Map floats in [0, 1] to u8 by scaling and round-to-nearest."""
    return np.rint(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def to_unit(b: np.ndarray) -> np.ndarray:
    return np.asarray(b, dtype=np.float64) / 255.0


def _read_header(data: bytes, magic: bytes, path):
    """Parse a binary netpbm header; returns (width, height, payload offset)."""
    if data[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} magic, got {data[:2]!r}")
    fields = []
    i = 2
    while len(fields) < 3:
        if i >= len(data):
            raise ImageFormatError(f"{path}: truncated header")
        c = data[i:i + 1]
        if c == b"#":  # comment runs to end of line
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        elif c.isdigit():
            j = i
            while j < len(data) and data[j:j + 1].isdigit():
                j += 1
            fields.append(int(data[i:j]))
            i = j
        else:
            raise ImageFormatError(f"{path}: bad header byte {c!r}")
    if i >= len(data) or not data[i:i + 1].isspace():
        raise ImageFormatError(f"{path}: header not terminated by whitespace")
    i += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    return width, height, i


def _read_raster(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, offset = _read_header(data, magic, path)
    expect = width * height * channels
    payload = data[offset:]
    if len(payload) != expect:
        raise ImageFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expect}"
        )
    raster = np.frombuffer(payload, dtype=np.uint8)
    if channels == 1:
        return raster.reshape(1, height, width).copy()
    return raster.reshape(height, width, channels).transpose(2, 0, 1).copy()


def _write_raster(path, magic: bytes, raster: np.ndarray) -> None:
    channels, height, width = raster.shape
    header = magic + b"\n" + f"{width} {height}\n255\n".encode()
    body = raster.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def read_pgm(path) -> np.ndarray:
    """Grayscale file to a (1, H, W) float tensor in [0, 1]."""
    return to_unit(_read_raster(path, b"P5", 1))


def write_pgm(path, image) -> None:
    image = as_tensor(image)
    if image.shape[0] != 1:
        raise ImageFormatError(f"grayscale output needs 1 channel, got {image.shape[0]}")
    _write_raster(path, b"P5", to_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Color file to a (3, H, W) float tensor in [0, 1]."""
    return to_unit(_read_raster(path, b"P6", 3))


def write_ppm(path, image) -> None:
    image = as_tensor(image)
    if image.shape[0] != 3:
        raise ImageFormatError(f"color output needs 3 channels, got {image.shape[0]}")
    _write_raster(path, b"P6", to_bytes(image))


def read_label_map(path) -> np.ndarray:
    """Label file to an (H, W) integer map over {1, 2, 3}."""
    raw = _read_raster(path, b"P5", 1)[0].astype(np.int64)
    bad = ~np.isin(raw, (FACE, HAIR, BACKGROUND))
    if bad.any():
        values = sorted(set(raw[bad].tolist()))
        raise ImageFormatError(f"{path}: label values {values} outside {{1, 2, 3}}")
    return raw


def write_label_map(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ImageFormatError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.isin(labels, (FACE, HAIR, BACKGROUND)).all():
        raise ImageFormatError("label values outside {1, 2, 3}")
    _write_raster(path, b"P5", labels.astype(np.uint8)[None])


def read_image(path) -> np.ndarray:
    """Read PGM, PPM, or (with Pillow installed) PNG by sniffing the magic."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P5":
        return read_pgm(path)
    if magic[:2] == b"P6":
        return read_ppm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    raise ImageFormatError(f"{path}: unrecognized image magic {magic[:2]!r}")


def _read_png(path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError(
            f"{path}: PNG input needs the optional Pillow dependency"
        ) from exc
    with Image.open(path) as img:
        gray = img.mode in ("1", "L", "I", "I;16")
        arr = np.asarray(img.convert("L" if gray else "RGB"), dtype=np.uint8)
    if arr.ndim == 2:
        return to_unit(arr[None])
    return to_unit(arr.transpose(2, 0, 1))


def write_png(path, image) -> None:
    try:
        from PIL import Image
    except ImportError as exc:
        raise ImageFormatError("PNG output needs the optional Pillow dependency") from exc
    image = as_tensor(image)
    raster = to_bytes(image)
    if image.shape[0] == 1:
        Image.fromarray(raster[0], mode="L").save(path)
    elif image.shape[0] == 3:
        Image.fromarray(raster.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ImageFormatError(f"PNG output needs 1 or 3 channels, got {image.shape[0]}")


# ---------------------------------------------------------------------------
# dataset manifests

@dataclass(frozen=True)
class ManifestEntry:
    photo_path: str
    sketch_path: str
    label_path: str | None = None


def parse_manifest(path) -> list:
    """Read tab-separated photo/sketch/label lines, resolving relative paths.

    Blank lines and '#' comments are skipped; anything else with fewer
    than 2 or more than 3 fields is an error.
    """
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3):
                raise ValueError(
                    f"{path}:{lineno}: expected 'photo<TAB>sketch[<TAB>labels]', "
                    f"got {len(fields)} fields"
                )
            label = resolve(fields[2]) if len(fields) == 3 else None
            entries.append(ManifestEntry(resolve(fields[0]), resolve(fields[1]), label))
    if not entries:
        raise ValueError(f"{path}: manifest lists no examples")
    return entries
