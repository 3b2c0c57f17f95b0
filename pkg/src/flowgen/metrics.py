"""Evaluation of generated versus real flow: MAE, RMSE, SMAPE and an
unbiased kernel two-sample distance (MMD) per region.

Point metrics compare the mean generated tensor against the mean real tensor.
MMD treats each sample's per-region flow (horizon x channels, flattened) as
one vector and uses a Gaussian kernel summed over a bandwidth list; the
unbiased estimator excludes kernel diagonals and can be negative.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import blobio

SMAPE_EPS = 1e-8


class MetricsError(ValueError):
    pass


def smape(a: np.ndarray, b: np.ndarray, eps: float = SMAPE_EPS) -> float:
    """Symmetric percentage error, mean of 2|a-b| / (|a|+|b|+eps); in [0, 2]."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.mean(2.0 * np.abs(a - b) / (np.abs(a) + np.abs(b) + eps)))


def point_metrics(generated_samples: np.ndarray, real_samples: np.ndarray
                  ) -> tuple[float, float, float]:
    """(MAE, RMSE, SMAPE) between mean generated and mean real tensors.

    Both inputs are (num_samples, ...) stacks with matching trailing shapes.
    """
    gen = np.asarray(generated_samples, dtype=float)
    real = np.asarray(real_samples, dtype=float)
    if gen.shape[0] == 0 or real.shape[0] == 0:
        raise MetricsError("need at least one generated and one real sample")
    if gen.shape[1:] != real.shape[1:]:
        raise MetricsError(f"shape mismatch: {gen.shape[1:]} vs {real.shape[1:]}")
    g, r = gen.mean(axis=0), real.mean(axis=0)
    diff = g - r
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff ** 2)))
    return mae, rmse, smape(g, r)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)


def median_heuristic_bandwidths(generated: np.ndarray, real: np.ndarray,
                                num: int = 5, factor: float = 2.0) -> list[float]:
    """Bandwidths geometrically spaced around the median pairwise distance of
    the pooled sample set."""
    pooled = np.concatenate([np.asarray(generated, float), np.asarray(real, float)])
    dists = np.sqrt(_sq_dists(pooled, pooled))
    upper = dists[np.triu_indices(len(pooled), k=1)]
    median = float(np.median(upper)) if upper.size else 1.0
    median = max(median, 1e-12)
    half = num // 2
    return [median * factor ** k for k in range(-half, num - half)]


def mmd_per_region(generated: np.ndarray, real: np.ndarray,
                   bandwidths) -> float:
    """Unbiased MMD between two vector sets, summed over the bandwidth list.

    generated: (n, D), real: (m, D) with n, m >= 2 (the diagonal-excluded
    terms need at least two samples each).
    """
    gen = np.atleast_2d(np.asarray(generated, dtype=float))
    rea = np.atleast_2d(np.asarray(real, dtype=float))
    n, m = len(gen), len(rea)
    if n < 2 or m < 2:
        raise MetricsError(f"need >= 2 samples per side, got n={n}, m={m}")
    d_gg = _sq_dists(gen, gen)
    d_rr = _sq_dists(rea, rea)
    d_gr = _sq_dists(gen, rea)
    off_gg = ~np.eye(n, dtype=bool)
    off_rr = ~np.eye(m, dtype=bool)
    total = 0.0
    for sigma in bandwidths:
        k_gg = np.exp(-d_gg / (2.0 * sigma ** 2))
        k_rr = np.exp(-d_rr / (2.0 * sigma ** 2))
        k_gr = np.exp(-d_gr / (2.0 * sigma ** 2))
        total += (k_gg[off_gg].sum() / (n * (n - 1))
                  - 2.0 * k_gr.mean()
                  + k_rr[off_rr].sum() / (m * (m - 1)))
    return float(total)


def region_vectors(samples: np.ndarray) -> np.ndarray:
    """(S, L, T, C) -> (L, S, T*C): per-region sample vectors with channels
    concatenated."""
    s, l = samples.shape[0], samples.shape[1]
    return np.transpose(samples.reshape(s, l, -1), (1, 0, 2))


@dataclass
class EvalReport:
    mae: float
    rmse: float
    smape: float
    mmd: float
    per_region: list[dict]

    def to_json(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse, "smape": self.smape,
                "mmd": self.mmd}


def compare(generated: np.ndarray, real: np.ndarray, region_ids,
            bandwidths=None) -> EvalReport:
    """Full report for aligned (S, L, T, C) generated vs (D, L, T, C) real."""
    generated = np.asarray(generated, dtype=float)
    real = np.asarray(real, dtype=float)
    if generated.shape[1:] != real.shape[1:]:
        raise MetricsError(f"region/horizon/channel mismatch: "
                           f"{generated.shape[1:]} vs {real.shape[1:]}")
    if len(region_ids) != generated.shape[1]:
        raise MetricsError("region_ids length does not match tensors")
    if len(region_ids) == 0:
        raise MetricsError("empty test split")
    mae, rmse, sm = point_metrics(generated, real)
    gen_vecs = region_vectors(generated)
    real_vecs = region_vectors(real)
    per_region = []
    mmds = []
    for i, rid in enumerate(region_ids):
        r_mae, r_rmse, r_smape = point_metrics(generated[:, i], real[:, i])
        bw = bandwidths or median_heuristic_bandwidths(gen_vecs[i], real_vecs[i])
        r_mmd = mmd_per_region(gen_vecs[i], real_vecs[i], bw)
        mmds.append(r_mmd)
        per_region.append({"region_id": rid, "mae": r_mae, "rmse": r_rmse,
                           "smape": r_smape, "mmd": r_mmd})
    return EvalReport(mae, rmse, sm, float(np.mean(mmds)), per_region)


def evaluate(run_dir, dataset, bandwidths=None) -> EvalReport:
    """Score a run directory's samples against the dataset's test regions and
    persist metrics.json plus per_region.csv."""
    from .diffusion import load_samples

    samples_path = os.path.join(run_dir, "samples.npz")
    if not os.path.exists(samples_path):
        raise MetricsError(f"samples not found in {run_dir}; run generate first")
    generated, sidecar = load_samples(samples_path)
    sample_ids = sidecar.get("region_ids", dataset.test_ids)
    missing = sorted(set(sample_ids) - set(dataset.region_ids))
    if missing:
        raise MetricsError(f"samples reference unknown regions: {missing}")
    if not sample_ids:
        raise MetricsError("empty test split")
    rows = dataset.rows_for(sample_ids)
    real = dataset.flow[:, rows]
    if real.shape[0] < 2 or generated.shape[0] < 2:
        raise MetricsError("need >= 2 real days and >= 2 samples for MMD")
    report = compare(generated, real, sample_ids, bandwidths)
    payload = report.to_json()
    payload["config"] = {"bandwidths": bandwidths, "num_samples": int(generated.shape[0]),
                         "num_real_days": int(real.shape[0])}
    blobio.atomic_write_text(os.path.join(run_dir, "metrics.json"),
                             json.dumps(payload, indent=2, sort_keys=True))
    lines = ["region_id,mae,rmse,smape,mmd\n"]
    lines += [f"{r['region_id']},{r['mae']:.8g},{r['rmse']:.8g},"
              f"{r['smape']:.8g},{r['mmd']:.8g}\n" for r in report.per_region]
    blobio.atomic_write_text(os.path.join(run_dir, "per_region.csv"), "".join(lines))
    return report


def plot_region_curves(generated: np.ndarray, real: np.ndarray, region_ids,
                       path) -> None:
    """One mean flow curve per region, generated vs real (channel 0)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = generated.mean(axis=0)
    r = real.mean(axis=0)
    count = len(region_ids)
    cols = min(4, count)
    rows = (count + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows),
                             squeeze=False)
    for i, rid in enumerate(region_ids):
        ax = axes[i // cols][i % cols]
        ax.plot(r[i, :, 0], label="real", lw=1.5)
        ax.plot(g[i, :, 0], label="generated", lw=1.5, ls="--")
        ax.set_title(str(rid), fontsize=9)
    axes[0][0].legend(fontsize=8)
    for k in range(count, rows * cols):
        axes[k // cols][k % cols].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
