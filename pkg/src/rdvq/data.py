"""Hermetic toy corpus and lossless image I/O.

Images are float arrays ``[3, H, W]`` in ``[-1, 1]``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

KINDS = ("gradient", "checkerboard", "blobs", "texture")


def _colors(rng, n):
    return rng.uniform(-1.0, 1.0, size=(n, 3, 1, 1))


def _gradient(rng, s):
    yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / (np.ptp(t) + 1e-12)
    a, b = _colors(rng, 2)
    return a * (1 - t) + b * t


def _checkerboard(rng, s):
    period = int(rng.choice([2, 4, 8]))
    yy, xx = np.mgrid[0:s, 0:s]
    oy, ox = rng.integers(0, period, size=2)
    t = (((yy + oy) // period + (xx + ox) // period) % 2).astype(float)
    a, b = _colors(rng, 2)
    return a * (1 - t) + b * t


def _blobs(rng, s):
    yy, xx = np.mgrid[0:s, 0:s].astype(float)
    img = np.broadcast_to(_colors(rng, 1)[0] * 0.5, (3, s, s)).copy()
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, s, size=2)
        sig = rng.uniform(s / 8, s / 3)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
        img += _colors(rng, 1)[0] * g
    return img


def _texture(rng, s):
    noise = rng.normal(size=(3, s, s))
    f = np.fft.fftfreq(s)
    r = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    filt = np.exp(-((r / rng.uniform(0.08, 0.2)) ** 2))
    img = np.real(np.fft.ifft2(np.fft.fft2(noise) * filt))
    return img / (np.abs(img).max() + 1e-12) * rng.uniform(0.4, 0.9)


_MAKERS = {"gradient": _gradient, "checkerboard": _checkerboard, "blobs": _blobs, "texture": _texture}


def toy_corpus(n: int, size: int = 16, seed: int = 0, kinds=KINDS) -> np.ndarray:
    """``n`` images cycling through ``kinds``, shape ``[n, 3, size, size]``."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size))
    for i in range(n):
        out[i] = _MAKERS[kinds[i % len(kinds)]](rng, size)
    return np.clip(out, -1.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 127.5 - 1.0


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_uint8(arr).transpose(2, 0, 1)


def save_image(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path)


IMAGE_SUFFIXES = (".png", ".ppm", ".pnm", ".bmp")


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_corpus(directory) -> tuple[list[str], list[np.ndarray]]:
    paths = list_images(directory)
    return [p.stem for p in paths], [load_image(p) for p in paths]


def write_corpus(directory, images: np.ndarray) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = d / f"img{i:04d}.png"
        save_image(p, img)
        paths.append(p)
    return paths
