"""Figure-style rendering of traction/displacement fields.

Writes a magnitude heatmap with an arrow overlay as binary PPM (always) and
PNG (when Pillow is available), plus a sidecar JSON recording the color
scaling so images remain comparable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .metrics import magnitude_field

# linear single-hue ramp: black towards this RGB at the per-image maximum
_RAMP_RGB = (255, 176, 64)
_UPSCALE = 4  # render pixels per grid step, keeps arrows legible


def _draw_line(img: np.ndarray, r0: float, c0: float, r1: float, c1: float, color):
    steps = int(max(abs(r1 - r0), abs(c1 - c0), 1) * 2)
    rr = np.linspace(r0, r1, steps).round().astype(int)
    cc = np.linspace(c0, c1, steps).round().astype(int)
    keep = (rr >= 0) & (rr < img.shape[0]) & (cc >= 0) & (cc < img.shape[1])
    img[rr[keep], cc[keep]] = color


def render_field_image(field: np.ndarray, out_path, threshold: float = 50.0,
                       stride: int = 15) -> dict:
    """Render a 2xNxN field; returns the sidecar metadata dict.

    Arrows are drawn every ``stride`` grid steps where the magnitude exceeds
    ``threshold`` (same units as the field).
    """
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise ValueError("field contains non-finite values")
    mag = magnitude_field(field)
    lo, hi = float(mag.min()), float(mag.max())
    scale = hi if hi > 0 else 1.0
    t = np.repeat(np.repeat(mag / scale, _UPSCALE, 0), _UPSCALE, 1)
    img = (t[..., None] * np.array(_RAMP_RGB)).astype(np.uint8)

    arrows = 0
    n = mag.shape[0]
    arrow_len = stride * _UPSCALE * 0.45
    for i in range(0, n, stride):
        for j in range(0, n, stride):
            if mag[i, j] <= threshold:
                continue
            fy, fx = field[1, i, j], field[0, i, j]
            norm = mag[i, j]
            r0 = (i + 0.5) * _UPSCALE
            c0 = (j + 0.5) * _UPSCALE
            _draw_line(img, r0, c0, r0 + arrow_len * fy / norm,
                       c0 + arrow_len * fx / norm, (255, 255, 255))
            arrows += 1

    out_path = Path(out_path)
    ppm_path = out_path.with_suffix(".ppm")
    with open(ppm_path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())

    png_path = None
    try:
        from PIL import Image
        png_path = out_path.with_suffix(".png")
        Image.fromarray(img).save(png_path)
    except ImportError:
        pass

    sidecar = {
        "magnitude_min": lo,
        "magnitude_max": hi,
        "color_scale_max": scale,
        "threshold": threshold,
        "arrow_stride": stride,
        "arrows_drawn": arrows,
        "ppm": ppm_path.name,
        "png": png_path.name if png_path else None,
    }
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return sidecar
