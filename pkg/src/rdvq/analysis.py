"""Evaluation sweeps and codebook/feature analysis, exported as CSV rows."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tokenizer as tk
from .pipeline import ModelBundle, baseline_zero_pad, compress, decompress, encode_indices
from .vq import usage_histogram

EVAL_COLUMNS = ("image_id", "bpp", "mse", "psnr", "prefix_fraction", "mode")
USAGE_COLUMNS = ("code", "count", "frequency")
PCA_COLUMNS = ("image_id", "row", "col", "pc1", "pc2", "pc3")
MODES = ("complete", "zeropad")


def psnr(mse: float) -> float:
    """PSNR for images in [-1, 1] (peak-to-peak 2)."""
    return math.inf if mse == 0 else 10.0 * math.log10(4.0 / mse)


def thread_count() -> int:
    raw = os.environ.get("RDVQ_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def sweep_fractions(bundle: ModelBundle, sweep: bool) -> list[float]:
    """One fraction per occupied decoding level, or just full transmission."""
    if not sweep:
        return [1.0]
    n = len(bundle.plan.levels)
    return [k / n for k in range(1, n + 1)]


def eval_image(image_id: str, image: np.ndarray, bundle: ModelBundle, fractions, modes=("complete",)) -> list[dict]:
    rows = []
    h, w = image.shape[1:]
    for f in fractions:
        stream = compress(image, bundle, f)
        bpp = 8.0 * len(stream.to_bytes()) / (h * w)
        for mode in modes:
            rec = decompress(stream, bundle) if mode == "complete" else baseline_zero_pad(stream, bundle)
            mse = float(np.mean((rec - image) ** 2))
            rows.append({"image_id": image_id, "bpp": bpp, "mse": mse, "psnr": psnr(mse),
                         "prefix_fraction": f, "mode": mode})
    return rows


def eval_sweep(ids, images, bundle: ModelBundle, sweep: bool = True, modes=("complete",),
               threads: int | None = None) -> list[dict]:
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}; expected one of {MODES}")
    fractions = sweep_fractions(bundle, sweep)
    threads = threads or thread_count()
    jobs = list(zip(ids, images))
    if threads == 1 or len(jobs) < 2:
        parts = [eval_image(i, x, bundle, fractions, modes) for i, x in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda job: eval_image(job[0], job[1], bundle, fractions, modes), jobs))
    return [row for part in parts for row in part]


def _all_indices(images, bundle: ModelBundle) -> np.ndarray:
    # images may differ in size, so encode one at a time
    return np.concatenate([encode_indices(x, bundle)[0].reshape(-1) for x in images])


def usage_rows(images, bundle: ModelBundle) -> tuple[list[dict], float]:
    K = bundle.codebook.K
    counts, entropy = usage_histogram(_all_indices(images, bundle), K)
    total = max(int(counts.sum()), 1)
    rows = [{"code": k, "count": int(c), "frequency": c / total} for k, c in enumerate(counts)]
    return rows, entropy


def finest_features(image: np.ndarray, bundle: ModelBundle) -> np.ndarray:
    """Encoder feature map at the finest scale, ``[C, h, w]`` (residuals undone)."""
    x = tk.pad_image(image[None], bundle.multiple)
    feats = tk.deresidualize(tk.encode(x, bundle.tok_cfg, bundle.tok_params))
    return feats[-1].value[0]


def pca_rows(ids, images, bundle: ModelBundle, components: int = 3) -> list[dict]:
    """Projections of every finest-scale feature vector on the top principal axes."""
    maps = [finest_features(x, bundle) for x in images]
    flat = np.concatenate([m.reshape(m.shape[0], -1).T for m in maps])
    centered = flat - flat.mean(0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:components]
    # fix the sign ambiguity: largest-magnitude loading positive
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(1)])
    axes = axes * signs[:, None]
    if len(axes) < components:
        axes = np.vstack([axes, np.zeros((components - len(axes), flat.shape[1]))])
    rows, start = [], 0
    for image_id, m in zip(ids, maps):
        _, h, w = m.shape
        proj = centered[start:start + h * w] @ axes.T
        start += h * w
        for n, (r, c) in enumerate(np.ndindex(h, w)):
            rows.append({"image_id": image_id, "row": r, "col": c,
                         **{f"pc{j + 1}": float(proj[n, j]) for j in range(components)}})
    return rows


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
