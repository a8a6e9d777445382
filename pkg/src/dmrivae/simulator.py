"""Three-cluster synthetic MSDKI data with ground truth and SNR-controlled noise."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .acquisition import AcquisitionScheme
from .signal_models import msdki_signal

logger = logging.getLogger(__name__)

D_RANGE = (0.05, 4.0)
K_RANGE = (0.0, 3.0)
# b * D * K < 6 keeps every MSDKI signal below its b=0 value
KURTOSIS_LIMIT = 6.0
MAX_REDRAWS = 100
NOISE_FLOOR = 1e-6


@dataclass(frozen=True)
class ClusterSpec:
    meanD: float
    meanK: float
    variance: float
    weight: float

    def __post_init__(self):
        if self.meanD <= 0 or self.meanK < 0 or self.variance < 0 or self.weight <= 0:
            raise ValueError(f"invalid cluster specification: {self}")


def default_clusters() -> list[ClusterSpec]:
    """White-matter, grey-matter and CSF-like clusters."""
    return [
        ClusterSpec(1.0, 1.5, 0.1, 0.5),
        ClusterSpec(1.5, 1.0, 0.1, 0.4),
        ClusterSpec(3.0, 0.0, 0.01, 0.1),
    ]


def load_clusters(path) -> list[ClusterSpec]:
    with open(path) as fh:
        items = json.load(fh)
    if isinstance(items, dict):
        items = items["clusters"]
    return [ClusterSpec(**{k: float(v) for k, v in item.items()}) for item in items]


@dataclass
class VoxelDataset:
    """``N`` voxels by ``T`` normalised measurements."""

    signals: np.ndarray
    scheme: AcquisitionScheme
    truth: Optional[np.ndarray] = None
    cluster_labels: Optional[np.ndarray] = None
    snr: Optional[float] = None
    param_names: tuple = ()
    indices: Optional[np.ndarray] = None      # (N, 3) voxel coordinates
    spatial_shape: Optional[tuple] = None
    affine: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        if self.signals.ndim != 2:
            raise ValueError("signals must be an N x T matrix")
        if self.signals.shape[1] != self.scheme.T:
            raise ValueError(f"signals have {self.signals.shape[1]} columns, scheme has {self.scheme.T}")
        if not np.all(np.isfinite(self.signals)):
            raise ValueError("signals contain non-finite values")
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)
            if self.truth.ndim == 1:
                self.truth = self.truth[:, None]
            if self.truth.shape[0] != self.n_voxels:
                raise ValueError("truth row count does not match signals")
        if self.cluster_labels is not None:
            self.cluster_labels = np.asarray(self.cluster_labels, dtype=np.int64)
            if self.cluster_labels.shape[0] != self.n_voxels:
                raise ValueError("label count does not match signals")

    @property
    def n_voxels(self) -> int:
        return int(self.signals.shape[0])

    def subset(self, rows) -> "VoxelDataset":
        rows = np.asarray(rows)
        return VoxelDataset(
            self.signals[rows], self.scheme,
            None if self.truth is None else self.truth[rows],
            None if self.cluster_labels is None else self.cluster_labels[rows],
            self.snr, self.param_names,
            None if self.indices is None else self.indices[rows],
            self.spatial_shape, self.affine, dict(self.meta))

    # ---- serialization -------------------------------------------------

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "signals.csv", self.signals)
        if self.truth is not None:
            write_csv(out / "truth.csv", self.truth)
        if self.cluster_labels is not None:
            write_csv(out / "labels.csv", self.cluster_labels[:, None], fmt="%d")
        self.scheme.save_json(out / "scheme.json")
        meta = dict(self.meta)
        meta.setdefault("snr", self.snr)
        meta["param_names"] = list(self.param_names)
        meta["n_voxels"] = self.n_voxels
        with open(out / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        return out

    @classmethod
    def load(cls, directory) -> "VoxelDataset":
        d = Path(directory)
        signals = read_csv(d / "signals.csv")
        scheme = AcquisitionScheme.load_json(d / "scheme.json")
        truth = read_csv(d / "truth.csv") if (d / "truth.csv").exists() else None
        labels = None
        if (d / "labels.csv").exists():
            labels = read_csv(d / "labels.csv").reshape(-1).astype(np.int64)
        meta = {}
        if (d / "meta.json").exists():
            with open(d / "meta.json") as fh:
                meta = json.load(fh)
        return cls(signals, scheme, truth, labels, meta.get("snr"),
                   tuple(meta.get("param_names", ())), meta=meta)


def write_csv(path, array, fmt: str = "%.17g") -> None:
    """Headerless comma-separated matrix, one row per line."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        arr = arr[:, None]
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(fmt % v for v in row))
            fh.write("\n")


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return np.empty((0, 0))
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def add_noise(clean: np.ndarray, snr: float, rng: np.random.Generator,
              kind: str = "gaussian") -> np.ndarray:
    """Additive noise with standard deviation ``1/snr`` on normalised signals."""
    if snr is None:
        return clean.copy()
    if snr <= 0:
        raise ValueError("snr must be positive")
    sigma = 1.0 / snr
    if kind == "gaussian":
        noisy = clean + sigma * rng.standard_normal(clean.shape)
    elif kind == "rician":
        re = clean + sigma * rng.standard_normal(clean.shape)
        im = sigma * rng.standard_normal(clean.shape)
        noisy = np.hypot(re, im)
    else:
        raise ValueError(f"unknown noise model {kind!r}")
    return np.maximum(noisy, NOISE_FLOOR)


def simulate(clusters: Sequence[ClusterSpec], n_voxels: int, scheme: AcquisitionScheme,
             snr: Optional[float] = None, seed: int = 0, noise: str = "gaussian",
             valid_only: bool = True) -> VoxelDataset:
    """Draw a clustered MSDKI dataset.

    Each voxel picks a cluster from the normalised weights and draws D and K
    independently from that cluster's Gaussian, clamped into the model
    range. With ``valid_only``, pairs with ``D * K * b_max >= 6`` (signals
    above the b=0 value inside the acquisition) are redrawn from the same
    cluster. Noise is added per measurement when ``snr`` is given.
    """
    if n_voxels < 1:
        raise ValueError("n_voxels must be at least 1")
    if snr is not None and snr <= 0:
        raise ValueError("snr must be positive")
    if not clusters:
        raise ValueError("at least one cluster is required")
    rng = np.random.default_rng(seed)
    weights = np.array([c.weight for c in clusters], dtype=np.float64)
    weights = weights / weights.sum()
    labels = rng.choice(len(clusters), size=n_voxels, p=weights)
    means = np.array([[c.meanD, c.meanK] for c in clusters])
    sds = np.sqrt(np.array([c.variance for c in clusters]))
    b_max = float(scheme.bvalues.max())

    def draw(rows):
        raw = means[labels[rows]] + sds[labels[rows], None] * rng.standard_normal((rows.size, 2))
        return raw, np.column_stack([np.clip(raw[:, 0], *D_RANGE), np.clip(raw[:, 1], *K_RANGE)])

    raw, truth = draw(np.arange(n_voxels))
    pending = np.flatnonzero(truth[:, 0] * truth[:, 1] * b_max >= KURTOSIS_LIMIT)
    if not valid_only:
        pending = pending[:0]
    n_redrawn = pending.size
    for _ in range(MAX_REDRAWS):
        if pending.size == 0:
            break
        raw[pending], truth[pending] = draw(pending)
        pending = pending[truth[pending, 0] * truth[pending, 1] * b_max >= KURTOSIS_LIMIT]
    if pending.size:
        truth[pending, 1] = np.nextafter(KURTOSIS_LIMIT / (truth[pending, 0] * b_max), 0)
    n_clamped = int(np.count_nonzero(np.any(truth != raw, axis=1)))
    if n_clamped or n_redrawn:
        logger.info("clamped %d and redrew %d of %d ground-truth voxels",
                    n_clamped, n_redrawn, n_voxels)
    clean = msdki_signal(truth, scheme)
    signals = add_noise(clean, snr, rng, noise)
    meta = {
        "seed": seed,
        "snr": snr,
        "noise": noise,
        "clusters": [asdict(c) for c in clusters],
        "clamped_fraction": n_clamped / n_voxels,
        "redrawn_fraction": n_redrawn / n_voxels,
        "valid_only": valid_only,
        "model": "msdki",
    }
    return VoxelDataset(signals, scheme, truth, labels, snr, ("D", "K"), meta=meta)
