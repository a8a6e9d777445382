"""Accuracy metrics, scatter exports and parameter-map comparisons."""

from __future__ import annotations

import csv
import itertools
import json
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .nifti_io import Volume, write_nifti

CLUSTER_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple",
                  "tab:brown", "tab:pink", "tab:gray", "tab:olive", "tab:cyan")


def pearson_r(pred, truth) -> Optional[float]:
    """Pearson correlation; ``None`` when undefined unless the vectors are identical."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.size < 2:
        return None
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    den = np.sqrt(np.sum(dp * dp) * np.sum(dt * dt))
    if den == 0:
        return 1.0 if np.array_equal(pred, truth) and truth.size > 1 else None
    return float(np.clip(np.sum(dp * dt) / den, -1.0, 1.0))


def _stats(pred, truth) -> dict:
    err = pred - truth
    return {
        "n": int(err.size),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "bias": float(np.mean(err)),
        "pearson_r": pearson_r(pred, truth),
    }


def score(params, truth, labels=None, names: Sequence[str] = ()) -> dict:
    """RMSE, bias and Pearson r per parameter, overall and per cluster.

    Parameters
    ----------
    params : ndarray or FitResult
        ``(N, M)`` estimates.
    truth : ndarray
        ``(N, M')`` ground truth; the first ``min(M, M')`` columns are scored.
    labels : ndarray, optional
        Cluster label per voxel.
    """
    if hasattr(params, "params"):
        names = names or params.param_names
        params = params.params
    pred = np.asarray(params, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim == 1:
        pred = pred[:, None]
    if truth.ndim == 1:
        truth = truth[:, None]
    if pred.shape[0] != truth.shape[0]:
        raise ValueError(f"{pred.shape[0]} predictions vs {truth.shape[0]} ground-truth rows")
    if labels is not None and len(labels) != pred.shape[0]:
        raise ValueError("label count does not match predictions")
    m = min(pred.shape[1], truth.shape[1])
    names = list(names)[:m] if names else [f"p{j}" for j in range(m)]
    table = {"overall": {}, "clusters": {}}
    for j, name in enumerate(names):
        table["overall"][name] = _stats(pred[:, j], truth[:, j])
    if labels is not None:
        labels = np.asarray(labels)
        for k in np.unique(labels):
            sel = labels == k
            table["clusters"][str(int(k))] = {
                name: _stats(pred[sel, j], truth[sel, j]) for j, name in enumerate(names)}
    return table


def export_scatter(params, truth, labels, path, names: Sequence[str] = ()) -> Path:
    """Long-format CSV of (truth, prediction, cluster) per voxel per parameter.

    A ``<stem>.json`` sidecar maps cluster labels to plot colours.
    """
    if truth is None:
        raise ValueError("scatter export needs ground truth")
    if hasattr(params, "params"):
        names = names or params.param_names
        params = params.params
    pred = np.atleast_2d(np.asarray(params, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape[0] != truth.shape[0]:
        raise ValueError("prediction and truth lengths differ")
    labels = np.zeros(pred.shape[0], dtype=int) if labels is None else np.asarray(labels)
    m = min(pred.shape[1], truth.shape[1])
    names = list(names)[:m] if names else [f"p{j}" for j in range(m)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "voxel", "truth", "prediction", "cluster"])
        for j, name in enumerate(names):
            for i in range(pred.shape[0]):
                w.writerow([name, i, repr(float(truth[i, j])), repr(float(pred[i, j])), int(labels[i])])
    sidecar = {"colors": {str(int(k)): CLUSTER_COLORS[int(k) % len(CLUSTER_COLORS)]
                          for k in np.unique(labels)},
               "parameters": names}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
    return path


def background_noise(volume: np.ndarray, mask: np.ndarray, erosion: int = 1) -> float:
    """Standard deviation of a map outside the eroded mask interior."""
    interior = ndimage.binary_erosion(mask, iterations=erosion) if erosion > 0 else mask
    outside = volume[~interior]
    return float(np.std(outside)) if outside.size else 0.0


def compare_maps(fits: Sequence[tuple[str, np.ndarray]], names: Sequence[str], mask: np.ndarray,
                 path, affine=None, voxel_size=(1.0, 1.0, 1.0)) -> dict:
    """Write per-fitter and pairwise-difference parameter maps.

    Parameters
    ----------
    fits : sequence of (label, maps)
        ``maps`` has shape ``(H, W, D, M)``.
    mask : ndarray of bool, shape (H, W, D)

    Returns
    -------
    dict
        Background-noise proxy per fitter and parameter, plus the list of
        files written.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    affine = np.eye(4) if affine is None else affine
    report = {"background_noise": {}, "files": []}
    for label, maps in fits:
        report["background_noise"][label] = {}
        for j, name in enumerate(names):
            f = write_nifti(Volume(maps[..., j], affine, voxel_size), out / f"{label}_{name}.nii")
            report["files"].append(f.name)
            report["background_noise"][label][name] = background_noise(maps[..., j], mask)
    for (la, ma), (lb, mb) in itertools.combinations(fits, 2):
        for j, name in enumerate(names):
            diff = ma[..., j] - mb[..., j]
            f = write_nifti(Volume(diff, affine, voxel_size), out / f"diff_{la}_vs_{lb}_{name}.nii")
            report["files"].append(f.name)
    return report


def pairwise_agreement(fits: Sequence[tuple[str, np.ndarray]], names: Sequence[str]) -> list[dict]:
    """RMS difference and correlation between every pair of fits."""
    rows = []
    for (la, pa), (lb, pb) in itertools.combinations(fits, 2):
        for j, name in enumerate(names):
            d = pa[:, j] - pb[:, j]
            rows.append({"a": la, "b": lb, "parameter": name,
                         "rms_difference": float(np.sqrt(np.mean(d * d))),
                         "pearson_r": pearson_r(pa[:, j], pb[:, j])})
    return rows


def metrics_schema() -> dict:
    with resources.files(__package__).joinpath("metrics.schema.json").open() as fh:
        return json.load(fh)
