"""Image and mask loading, bilinear resizing with letterboxing, and gray-scale detection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

DEFAULT_GRAY_TOLERANCE = 2.0 / 255.0


class ImageLoadError(OSError):
    pass


@dataclass(frozen=True)
class Placement:
    """Where the resized image sits in the target canvas: ``u' = sx * u + ox``."""

    sx: float
    sy: float
    ox: float
    oy: float


def target_size(width: int, height: int, long_side: int | None) -> tuple[int, int]:
    if long_side is None:
        return width, height
    s = long_side / max(width, height)
    return max(1, int(round(width * s))), max(1, int(round(height * s)))


def _resize_channels(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image to (W, H) = ``size``."""
    out = [np.asarray(Image.fromarray(arr[..., c].astype(np.float32), mode="F").resize(size, Image.BILINEAR))
           for c in range(arr.shape[-1])]
    return np.stack(out, axis=-1).astype(np.float64)


def resize_pixels(pixels: np.ndarray, target: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, Placement]:
    """Resize to fit ``target`` (W, H) preserving aspect; pad the remainder.

    Returns pixels, the letterbox validity mask and the placement.
    """
    h0, w0 = pixels.shape[:2]
    tw, th = target
    if (w0, h0) == (tw, th):
        return pixels.astype(np.float64), np.ones((th, tw), bool), Placement(1.0, 1.0, 0.0, 0.0)
    s = min(tw / w0, th / h0)
    nw, nh = min(tw, max(1, int(round(w0 * s)))), min(th, max(1, int(round(h0 * s))))
    inner = _resize_channels(pixels, (nw, nh))
    ox, oy = (tw - nw) // 2, (th - nh) // 2
    out = np.zeros((th, tw, pixels.shape[2]))
    out[oy:oy + nh, ox:ox + nw] = inner
    valid = np.zeros((th, tw), bool)
    valid[oy:oy + nh, ox:ox + nw] = True
    return np.clip(out, 0.0, 1.0), valid, Placement(nw / w0, nh / h0, float(ox), float(oy))


def read_image(path) -> np.ndarray:
    """(H, W, 3) float pixels in [0, 1] from an 8-bit raster."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            return np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode image {path}: {exc}") from exc


def load_and_resize_image(path, target: tuple[int, int] | None = None):
    """Load ``path`` and fit it into ``target`` (W, H) with bilinear resampling.

    Returns ``(pixels, letterbox_mask, placement)``.
    """
    pix = read_image(path)
    if target is None:
        target = (pix.shape[1], pix.shape[0])
    return resize_pixels(pix, target)


def mask_path_for(image_path) -> Path:
    p = Path(image_path)
    return p.with_name(p.stem + ".mask.png")


def load_mask(image_path, shape_hw: tuple[int, int], placement: Placement | None = None) -> np.ndarray:
    """Segmentation mask (nonzero = keep) resized like its image; all-valid if absent."""
    mp = mask_path_for(image_path)
    h, w = shape_hw
    if not mp.exists():
        return np.ones((h, w), bool)
    try:
        with Image.open(mp) as im:
            m = np.asarray(im.convert("L")) > 0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageLoadError(f"cannot decode mask {mp}: {exc}") from exc
    if placement is None or (placement.sx == 1.0 and placement.sy == 1.0 and m.shape == (h, w)):
        return m if m.shape == (h, w) else np.ones((h, w), bool)
    nw = int(round(m.shape[1] * placement.sx))
    nh = int(round(m.shape[0] * placement.sy))
    small = np.asarray(Image.fromarray(m.astype(np.uint8) * 255).resize((nw, nh), Image.NEAREST)) > 0
    out = np.zeros((h, w), bool)
    ox, oy = int(placement.ox), int(placement.oy)
    out[oy:oy + nh, ox:ox + nw] = small
    return out


def channel_spread(pixels: np.ndarray) -> np.ndarray:
    return pixels.max(axis=-1) - pixels.min(axis=-1)


def detect_grayscale(pixels: np.ndarray, tolerance: float = DEFAULT_GRAY_TOLERANCE,
                     mask: np.ndarray | None = None) -> bool:
    """True when at least 99% of valid pixels have channel spread within ``tolerance``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    spread = channel_spread(pixels)
    if mask is not None:
        spread = spread[np.asarray(mask, bool)]
    if spread.size == 0:
        return False
    # slack absorbs the rounding of 8-bit values divided by 255
    return float(np.mean(spread <= tolerance + 1e-9)) >= 0.99


def save_png(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
