"""Dataset ingestion, augmentation, class balancing and the synthetic toy set.

Images are held as float arrays of shape (1, 3, H, W): pixel values are
scaled to [0, 1] and then standardized with a fixed per-channel mean/std.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .config import AUGMENT_OPS, CLASS_NAMES, AugmentConfig
from .errors import ConfigError, HsictError

log = logging.getLogger(__name__)

LABELS = {name: i for i, name in enumerate(CLASS_NAMES)}
# Kaggle folder names seen in the wild for the same class
CLASS_ALIASES = {"mpox": "Monkeypox"}
DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


class DecodeError(HsictError, ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int
    path: str | None = None

    def __post_init__(self):
        if not 0 <= self.label < len(CLASS_NAMES):
            raise ValueError(f"label {self.label} outside 0..{len(CLASS_NAMES) - 1}")
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 3):
            raise ValueError(f"sample image must be (1, 3, H, W), got {self.image.shape}")


def label_for(name: str) -> int | None:
    key = name.strip().lower()
    for cls in CLASS_NAMES:
        if cls.lower() == key:
            return LABELS[cls]
    alias = CLASS_ALIASES.get(key)
    return LABELS[alias] if alias else None


# -- codecs ----------------------------------------------------------------------

def _ppm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("malformed PPM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1  # exactly one whitespace byte before the raster


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise DecodeError("not a binary PPM (P6) file")
    (w, h, maxval), pos = _ppm_tokens(buf, 3)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise DecodeError(f"bad PPM geometry {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    need = w * h * 3 * dtype.itemsize
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise DecodeError(f"PPM raster truncated: {len(raster)} of {need} bytes")
    img = np.frombuffer(raster, dtype=dtype).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("encode_ppm expects an (H, W, 3) uint8 array")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def _pillow_decode(buf: bytes) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover - depends on the environment
        raise DecodeError("PNG/JPEG decoding needs Pillow (pip install artifact[images])") from e
    import io

    try:
        with Image.open(io.BytesIO(buf)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as e:
        raise DecodeError(str(e)) from e


DECODERS: dict[str, Callable[[bytes], np.ndarray]] = {
    ".ppm": decode_ppm,
    ".png": _pillow_decode,
    ".jpg": _pillow_decode,
    ".jpeg": _pillow_decode,
}


def register_decoder(suffix: str, fn: Callable[[bytes], np.ndarray]) -> None:
    DECODERS[suffix.lower()] = fn


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    dec = DECODERS.get(path.suffix.lower())
    if dec is None:
        raise DecodeError(f"no decoder registered for {path.suffix!r}")
    img = dec(path.read_bytes())
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DecodeError(f"decoder returned {img.dtype} {img.shape}, expected uint8 (H, W, 3)")
    return img


# -- geometry ------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, clamped at the edges
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes. Same-size input is returned unchanged."""
    h, w = img.shape[-2:]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    r0, r1, fr = _axis_weights(h, oh)
    c0, c1, fc = _axis_weights(w, ow)
    fr = fr.astype(img.dtype)[:, None]
    fc = fc.astype(img.dtype)
    top = img[..., r0, :] * (1 - fr) + img[..., r1, :] * fr
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def normalize_pixels(rgb: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) uint8 or [0, 255] floats -> standardized (1, 3, H, W)."""
    x = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1)[None] / 255.0
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return ((x - m) / s).astype(dtype)


def denormalize_pixels(image: np.ndarray, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`, rounded back to (H, W, 3) uint8."""
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    x = (np.asarray(image[0], dtype=np.float64) * s + m) * 255.0
    return np.clip(np.round(x), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_dataset(root: str | Path, image_size: int = 224, mean=DEFAULT_MEAN, std=DEFAULT_STD,
                 dtype=np.float32) -> list[Sample]:
    """Read ``root/<ClassName>/*`` into resized, standardized samples.

    Class folders match case-insensitively; unknown folders and files that
    fail to decode are logged and skipped.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    samples: list[Sample] = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        label = label_for(sub.name)
        if label is None:
            log.warning("skipping unknown class folder %s", sub)
            continue
        for f in sorted(p for p in sub.iterdir() if p.is_file()):
            if f.suffix.lower() not in DECODERS:
                log.warning("skipping %s: unsupported extension", f)
                continue
            try:
                rgb = read_image(f)
            except (DecodeError, OSError) as e:
                log.warning("skipping %s: %s", f, e)
                continue
            img = resize_bilinear(normalize_pixels(rgb, mean, std, np.float64), (image_size, image_size))
            samples.append(Sample(img.astype(dtype), label, str(f)))
    if not samples:
        raise HsictError(f"no decodable images under {root}")
    return samples


def write_dataset(samples: Sequence[Sample], root: str | Path, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> list[Path]:
    """Write samples as PPM files in the ``root/<ClassName>/`` layout."""
    root = Path(root)
    paths = []
    for i, s in enumerate(samples):
        d = root / CLASS_NAMES[s.label]
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{i:06d}.ppm"
        p.write_bytes(encode_ppm(denormalize_pixels(s.image, mean, std)))
        paths.append(p)
    return paths


# -- augmentation ----------------------------------------------------------------------

def warp_affine(image: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Resample (1, C, H, W) through a 2x2 matrix about the image center.

    ``matrix`` maps output (row, col) offsets to input offsets. Bilinear
    interpolation with mirrored borders.
    """
    _, c, h, w = image.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    out = np.empty_like(image)
    for ch in range(c):
        out[0, ch] = ndimage.affine_transform(image[0, ch], matrix, offset=offset, order=1, mode="mirror")
    return out


def augment_matrix(scale: float = 1.0, shear_deg: float = 0.0) -> np.ndarray:
    """Output->input sampling matrix for an isotropic zoom by ``scale`` and a
    horizontal shear of ``shear_deg`` degrees."""
    forward = np.array([[1.0, 0.0], [np.tan(np.radians(shear_deg)), 1.0]]) * scale
    return np.linalg.inv(forward)


def augment_sample(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Apply each enabled op independently with probability ``cfg.prob``."""
    img = s.image
    ops = set(cfg.ops)
    # draw for every op in a fixed order so the stream does not depend on which are enabled
    draws = {op: rng.random() < cfg.prob for op in AUGMENT_OPS}
    scale = float(rng.uniform(*cfg.scale_range))
    shear = float(rng.uniform(*cfg.shear_range))
    if "flip_horizontal" in ops and draws["flip_horizontal"]:
        img = img[..., ::-1]
    if "flip_vertical" in ops and draws["flip_vertical"]:
        img = img[..., ::-1, :]
    if "reflect" in ops and draws["reflect"] and img.shape[-1] == img.shape[-2]:
        img = img.swapaxes(-1, -2)
    use_scale = "scale" in ops and draws["scale"]
    use_shear = "shear" in ops and draws["shear"]
    if use_scale or use_shear:
        m = augment_matrix(scale if use_scale else 1.0, shear if use_shear else 0.0)
        if not np.array_equal(m, np.eye(2)):
            img = warp_affine(np.ascontiguousarray(img), m)
    return Sample(np.ascontiguousarray(img), s.label, s.path)


def balance_classes(samples: Sequence[Sample], target: int | dict[int, int], cfg: AugmentConfig,
                    seed: int = 0) -> list[Sample]:
    """Pad minority classes with augmented copies up to ``target`` per class.

    Originals are always kept, in order, ahead of the generated copies. A
    copy is redrawn until it differs from its source.
    """
    out = list(samples)
    by_class: dict[int, list[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    targets = target if isinstance(target, dict) else {c: int(target) for c in by_class}
    for c in sorted(by_class):
        have = by_class[c]
        need = targets.get(c, len(have)) - len(have)
        for k in range(max(0, need)):
            src = have[k % len(have)]
            rng = np.random.default_rng([seed, c, k])
            for _ in range(32):
                copy = augment_sample(src, cfg, rng)
                if not np.array_equal(copy.image, src.image):
                    break
            else:
                # every enabled op left this image unchanged; force a small zoom
                copy = Sample(warp_affine(src.image, augment_matrix(1.05)), src.label, src.path)
            out.append(copy)
    return out


# -- synthetic toy data ------------------------------------------------------------------

TOY_PATTERNS = ("blobs", "stripes", "dots", "ring", "noise")
_TOY_HUE = np.array([
    [0.05, 0.0, 0.0],
    [0.0, 0.05, 0.0],
    [0.0, 0.0, 0.05],
    [0.035, 0.035, 0.0],
    [0.0, 0.035, 0.035],
])


def _toy_field(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:    # a few large soft blobs
        f = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.15, 0.85, 2) * size
            sig = rng.uniform(0.08, 0.14) * size
            f += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
        return f
    if kind == 1:    # straight stripes at a random orientation
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(0.15, 0.3) * size
        return np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + rng.uniform(0, 2 * np.pi))
    if kind == 2:    # many small dots
        f = np.zeros((size, size))
        sig = 0.025 * size
        for cy, cx in rng.uniform(0, size, (int(rng.integers(25, 40)), 2)):
            f = np.maximum(f, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2)))
        return f + 1e-3 * rng.random((size, size))
    if kind == 3:    # one annulus
        cy, cx = rng.uniform(0.35, 0.65, 2) * size
        radius = rng.uniform(0.2, 0.32) * size
        return -np.abs(np.hypot(yy - cy, xx - cx) - radius)
    return rng.random((size, size))   # unstructured speckle


def synth_toy_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) uint8 image of the given toy class."""
    field = _toy_field(label, size, rng)
    # the annulus stays a thin band; a wide one reads as a filled disk
    coverage = rng.uniform(0.1, 0.16) if label == 3 else rng.uniform(0.25, 0.45)
    mask = field >= np.quantile(field, 1.0 - coverage)
    bg = rng.uniform(0.05, 0.95, 3)
    # foreground differs from background by at least 0.2 in every channel
    shift = rng.uniform(0.2, 0.45, 3) * np.where(bg > 0.5, -1.0, 1.0)
    fg = bg + shift
    img = np.where(mask[..., None], fg, bg) + _TOY_HUE[label]
    img = img + rng.normal(0.0, 0.06, img.shape)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def synth_toy_dataset(n_per_class: int = 200, size: int = 64, seed: int = 0, mean=DEFAULT_MEAN,
                      std=DEFAULT_STD, dtype=np.float32) -> list[Sample]:
    """Deterministic 5-class texture dataset, classes interleaved."""
    if size < 16:
        raise ConfigError("toy images must be at least 16 pixels on a side")
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out = []
    for i in range(n_per_class):
        for label in range(len(CLASS_NAMES)):
            rng = np.random.default_rng([seed, label, i])
            rgb = synth_toy_image(label, size, rng)
            out.append(Sample(normalize_pixels(rgb, mean, std, dtype), label, f"toy:{TOY_PATTERNS[label]}:{i}"))
    return out


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise HsictError("cannot stack an empty sample list")
    return (np.concatenate([s.image for s in samples], axis=0),
            np.array([s.label for s in samples], dtype=np.int64))
