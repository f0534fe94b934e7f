"""
PNG rendering for analysis artifacts
Histogram-vs-oracle bars and transition-matrix heatmaps drawn with Pillow.
"""
import logging

import numpy as np
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

BACKGROUND = (255, 255, 255)
BAR = (70, 130, 180)
CURVE = (200, 40, 40)
UNDEFINED = (255, 200, 0)


def histogram_image(empirical, canonical, size=(640, 360), margin=20):
    """Bars for the empirical bin masses, a polyline for the oracle masses."""
    empirical = np.asarray(empirical, dtype=np.float64)
    canonical = np.asarray(canonical, dtype=np.float64)
    width, height = size
    img = Image.new("RGB", size, BACKGROUND)
    draw = ImageDraw.Draw(img)
    peak = max(float(empirical.max(initial=0.0)), float(canonical.max(initial=0.0)), 1e-12)
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    bin_w = plot_w / max(len(empirical), 1)
    base = height - margin

    for i, mass in enumerate(empirical):
        x0 = margin + i * bin_w
        top = base - plot_h * mass / peak
        draw.rectangle([x0, top, x0 + max(bin_w - 1, 1), base], fill=BAR)

    points = [(margin + (i + 0.5) * bin_w, base - plot_h * mass / peak) for i, mass in enumerate(canonical)]
    if len(points) > 1:
        draw.line(points, fill=CURVE, width=2)
    draw.line([(margin, base), (width - margin, base)], fill=(0, 0, 0))
    return img


def matrix_image(matrix, cell=48):
    """Grayscale heatmap (black = 1, white = 0); NaN rows are drawn in amber."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    img = Image.new("RGB", (cols * cell, rows * cell), BACKGROUND)
    draw = ImageDraw.Draw(img)
    for i in range(rows):
        for j in range(cols):
            value = matrix[i, j]
            if np.isnan(value):
                color = UNDEFINED
            else:
                shade = int(round(255 * (1.0 - min(max(value, 0.0), 1.0))))
                color = (shade, shade, shade)
            draw.rectangle([j * cell, i * cell, (j + 1) * cell - 1, (i + 1) * cell - 1], fill=color)
    return img


def save_png(img, path):
    img.save(path, format="PNG")
    logger.info(f"Wrote {img.size[0]}x{img.size[1]} image to {path}")
    return path
