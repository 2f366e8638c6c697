from pathlib import Path
from typing import Union

import numpy as np

from .protofed_aux import Box, ConfigurationError, FormatError

_PNM_CHANNELS = {b"P5": 1, b"P6": 3}
_CHANNELS_PNM = {1: b"P5", 3: b"P6"}


def _read_token(raw: bytes, pos: int) -> tuple[bytes, int]:
    """Reads one whitespace-delimited header token, skipping comments."""
    while pos < len(raw):
        ch = raw[pos:pos + 1]
        if ch == b"#":
            eol = raw.find(b"\n", pos)
            pos = len(raw) if eol < 0 else eol + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(raw) and not raw[pos:pos + 1].isspace() \
            and raw[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PNM header", offset=start)
    return raw[start:pos], pos


def load_pnm(path: Union[str, Path]) -> np.ndarray:
    """Loads a binary 8-bit PGM (P5) or PPM (P6).

    Returns a channels×height×width float array scaled to [0, 1].
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Could not open image. File {path} does not exist.")
    raw = path.read_bytes()

    magic, pos = _read_token(raw, 0)
    if magic not in _PNM_CHANNELS:
        raise FormatError(f"unsupported PNM magic {magic!r}", offset=0)
    header = []
    for _ in range(3):
        offset = pos
        token, pos = _read_token(raw, pos)
        if not token.isdigit():
            raise FormatError(f"malformed PNM header field {token!r}",
                              offset=offset)
        header.append(int(token))
    width, height, maxval = header
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PNM extents {width}x{height}", offset=pos)
    if maxval != 255:
        raise FormatError(f"only 8-bit PNM (max value 255) is supported, "
                          f"got {maxval}", offset=pos)
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PNM header", offset=pos)
    pos += 1

    channels = _PNM_CHANNELS[magic]
    expected = width * height * channels
    if len(raw) - pos < expected:
        raise FormatError(
            f"short PNM payload: expected {expected} bytes, found "
            f"{len(raw) - pos}", offset=len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=pos)
    pixels = pixels.reshape(height, width, channels).transpose(2, 0, 1)
    return pixels.astype(np.float64) / 255.0


def save_pnm(image: np.ndarray, path: Union[str, Path]) -> Path:
    """Writes a 1-channel image as P5 or a 3-channel image as P6.

    Values are clipped to [0, 1] and rounded to the nearest 8-bit level.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3 or image.shape[0] not in _CHANNELS_PNM:
        raise ConfigurationError(
            f"save_pnm expects 1×H×W or 3×H×W, got {image.shape}")
    channels, height, width = image.shape
    levels = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CHANNELS_PNM[channels]
                + f"\n{width} {height}\n255\n".encode("ascii"))
        f.write(levels.transpose(1, 2, 0).tobytes())
    return path


def upsample_bilinear(values: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-d map to ``target``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ConfigurationError(
            f"upsample_bilinear expects a 2-d map, got {values.shape}")
    h, w = values.shape
    th, tw = target
    if th < h or tw < w:
        raise ConfigurationError(
            f"upsample_bilinear cannot downscale {h}x{w} to {th}x{tw}")

    def _coords(src: int, dst: int):
        if src == 1 or dst == 1:
            pos = np.zeros(dst)
        else:
            pos = np.arange(dst) * (src - 1) / (dst - 1)
        lo = np.minimum(np.floor(pos).astype(int), src - 1)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = _coords(h, th)
    c0, c1, fc = _coords(w, tw)
    top = values[r0][:, c0] * (1 - fc) + values[r0][:, c1] * fc
    bottom = values[r1][:, c0] * (1 - fc) + values[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    if np.ptp(values) == 0:
        out = np.full((th, tw), values.flat[0])
    return out


def diverging_palette(heatmap: np.ndarray) -> np.ndarray:
    """Maps values in [0, 1] to a blue→white→red 3×H×W image."""
    v = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    lower = np.clip(2.0 * v, 0.0, 1.0)
    upper = np.clip(2.0 * v - 1.0, 0.0, 1.0)
    red = np.where(v < 0.5, lower, 1.0)
    green = np.where(v < 0.5, lower, 1.0 - upper)
    blue = np.where(v < 0.5, 1.0, 1.0 - upper)
    return np.stack([red, green, blue])


def to_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return image.copy()


def draw_box(image: np.ndarray, box: Box, color=(1.0, 0.0, 0.0)) -> np.ndarray:
    """Burns a one-pixel rectangle outline into a 3×H×W image."""
    out = to_rgb(image)
    x0, y0 = box.x, box.y
    x1, y1 = box.x + box.w - 1, box.y + box.h - 1
    for ch, value in enumerate(color):
        out[ch, y0, x0:x1 + 1] = value
        out[ch, y1, x0:x1 + 1] = value
        out[ch, y0:y1 + 1, x0] = value
        out[ch, y0:y1 + 1, x1] = value
    return out
