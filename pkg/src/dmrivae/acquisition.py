"""Acquisition schemes: b-values and gradient directions.

b-values are stored in ms/um^2 so that a diffusivity of 1 um^2/ms gives
exp(-1) attenuation at b = 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

UNIT_THRESHOLD = 100.0
_DIR_TOL = 1e-6


class AcquisitionError(ValueError):
    """Raised for malformed or inconsistent acquisition descriptions."""


@dataclass(frozen=True)
class AcquisitionScheme:
    bvalues: np.ndarray
    directions: np.ndarray
    direction_free: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        b = np.asarray(self.bvalues, dtype=np.float64).reshape(-1)
        g = np.asarray(self.directions, dtype=np.float64)
        if g.ndim != 2 or g.shape[1] != 3:
            raise AcquisitionError(f"directions must be T x 3, got shape {g.shape}")
        if b.shape[0] != g.shape[0]:
            raise AcquisitionError(
                f"length mismatch: {b.shape[0]} b-values vs {g.shape[0]} directions")
        if b.shape[0] < 2:
            raise AcquisitionError("at least two measurements are required")
        if not np.all(np.isfinite(b)) or np.any(b < 0):
            raise AcquisitionError("b-values must be finite and non-negative")
        if not np.any(b == 0):
            raise AcquisitionError("scheme needs at least one b=0 measurement")
        norms = np.linalg.norm(g, axis=1)
        bad = (np.abs(norms - 1.0) >= _DIR_TOL) & ~((norms == 0) & (b == 0))
        if np.any(bad):
            raise AcquisitionError(f"non-unit gradient directions at rows {np.flatnonzero(bad)}")
        b.setflags(write=False)
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "bvalues", b)
        object.__setattr__(self, "directions", g)

    @property
    def T(self) -> int:
        return int(self.bvalues.shape[0])

    @property
    def b0_mask(self) -> np.ndarray:
        return self.bvalues == 0

    def to_dict(self) -> dict:
        return {
            "bvalues": self.bvalues.tolist(),
            "directions": self.directions.tolist(),
            "direction_free": self.direction_free,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionScheme":
        return cls(np.array(d["bvalues"], dtype=np.float64),
                   np.array(d["directions"], dtype=np.float64).reshape(-1, 3),
                   bool(d.get("direction_free", False)),
                   dict(d.get("metadata", {})))

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load_json(cls, path) -> "AcquisitionScheme":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _parse_rows(text: str, what: str) -> list[list[float]]:
    rows = []
    for line in text.strip().splitlines():
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise AcquisitionError(f"non-numeric token in {what}: {exc}") from None
    return rows


def parse_bval_bvec(bval_text: str, bvec_text: str, units: str = "auto") -> AcquisitionScheme:
    """Parse FSL-style ``bval``/``bvec`` file contents.

    Parameters
    ----------
    bval_text : str
        One row of T b-values.
    bvec_text : str
        Three rows (x, y, z) of T direction components.
    units : {'auto', 's/mm2', 'ms/um2'}
        Unit of the b-values. ``auto`` treats the values as s/mm^2 when the
        largest one exceeds 100.

    Returns
    -------
    AcquisitionScheme
    """
    brows = _parse_rows(bval_text, "bval")
    bvals = np.array([v for row in brows for v in row], dtype=np.float64)
    grows = _parse_rows(bvec_text, "bvec")
    if len(grows) == 3:
        lengths = {len(r) for r in grows}
        if len(lengths) != 1:
            raise AcquisitionError("bvec rows have different lengths")
        g = np.array(grows, dtype=np.float64).T
    elif grows and all(len(r) == 3 for r in grows):
        # column layout (T rows of x y z) as written by some converters
        g = np.array(grows, dtype=np.float64)
    else:
        raise AcquisitionError("bvec must have three rows of T components")
    if g.shape[0] != bvals.shape[0]:
        raise AcquisitionError(
            f"length mismatch: bval has {bvals.shape[0]} entries, bvec has {g.shape[0]}")
    if bvals.shape[0] < 2:
        raise AcquisitionError("at least two measurements are required")

    if units == "auto":
        scaled = bool(bvals.max() > UNIT_THRESHOLD)
        detected = "s/mm2" if scaled else "ms/um2"
        logger.info("b-value units detected as %s (max b = %g)", detected, bvals.max())
    elif units in ("s/mm2", "ms/um2"):
        scaled = units == "s/mm2"
        detected = units
    else:
        raise AcquisitionError(f"unknown b-value unit {units!r}")
    if scaled:
        bvals = bvals / 1000.0

    norms = np.linalg.norm(g, axis=1)
    nz = norms > 0
    g[nz] = g[nz] / norms[nz, None]
    return AcquisitionScheme(bvals, g, metadata={"source_units": detected,
                                                 "unit_detection": units})


def format_bval_bvec(scheme: AcquisitionScheme) -> tuple[str, str]:
    """Serialize a scheme back to FSL text (b-values in ms/um^2)."""
    bval = " ".join(repr(float(b)) for b in scheme.bvalues) + "\n"
    bvec = "\n".join(" ".join(repr(float(v)) for v in scheme.directions[:, k])
                     for k in range(3)) + "\n"
    return bval, bvec


def scheme_for_simulation(bvalues) -> AcquisitionScheme:
    """Direction-free scheme for the MSDKI simulation grid."""
    b = np.asarray(list(bvalues), dtype=np.float64)
    if b.size == 0:
        raise AcquisitionError("empty b-value list")
    if not np.any(b == 0):
        raise AcquisitionError("simulation grid needs a b=0 entry")
    g = np.tile([0.0, 0.0, 1.0], (b.size, 1))
    return AcquisitionScheme(b, g, direction_free=True)


# max b kept at 2 ms/um^2: beyond 3/(D K) the kurtosis term makes signals grow with b
DEFAULT_SIM_BVALUES = (0.0, 0.4, 0.8, 1.2, 1.6, 2.0)


def fibonacci_shell(n: int, bvalue: float = 1.0, n_b0: int = 1) -> AcquisitionScheme:
    """Single shell of ``n`` roughly uniform directions plus ``n_b0`` b=0 images."""
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(1.0 - z * z)
    ang = np.pi * (1.0 + np.sqrt(5.0)) * k
    dirs = np.column_stack([r * np.cos(ang), r * np.sin(ang), z])
    g = np.vstack([np.zeros((n_b0, 3)), dirs])
    b = np.concatenate([np.zeros(n_b0), np.full(n, float(bvalue))])
    return AcquisitionScheme(b, g)
