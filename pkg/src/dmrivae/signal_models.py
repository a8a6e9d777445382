"""Closed-form diffusion signal models with analytic parameter Jacobians.

All functions are vectorised over voxels: parameter arrays have shape
``(N, M)`` (or ``(M,)`` for a single voxel) and signals ``(N, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acquisition import AcquisitionScheme


def _as_2d(params) -> tuple[np.ndarray, bool]:
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 1:
        return p[None, :], True
    return p, False


def _squeeze(out: np.ndarray, single: bool) -> np.ndarray:
    return out[0] if single else out


# --------------------------------------------------------------------------
# MSDKI
# --------------------------------------------------------------------------

def msdki_signal(params, scheme: AcquisitionScheme) -> np.ndarray:
    """Mean-signal kurtosis model ``exp(-b D + b^2 D^2 K / 6)``.

    ``params`` columns are (D, K).
    """
    p, single = _as_2d(params)
    D = p[:, 0:1]
    K = p[:, 1:2]
    b = scheme.bvalues[None, :]
    s = np.exp(-b * D + b * b * D * D * K / 6.0)
    return _squeeze(s, single)


def msdki_gradient(params, scheme: AcquisitionScheme) -> np.ndarray:
    """Jacobian of :func:`msdki_signal`, shape ``(N, T, 2)``."""
    p, single = _as_2d(params)
    D = p[:, 0:1]
    K = p[:, 1:2]
    b = scheme.bvalues[None, :]
    s = np.exp(-b * D + b * b * D * D * K / 6.0)
    jac = np.empty(s.shape + (2,))
    jac[..., 0] = s * (-b + b * b * D * K / 3.0)
    jac[..., 1] = s * b * b * D * D / 6.0
    return _squeeze(jac, single)


# --------------------------------------------------------------------------
# Ball and stick
# --------------------------------------------------------------------------

def stick_direction(theta, phi) -> np.ndarray:
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def ballstick_signal(params, scheme: AcquisitionScheme, stick_exponent: str = "squared") -> np.ndarray:
    """Ball-and-stick signal; ``params`` columns are (f, Dpar, Diso, theta, phi)."""
    p, single = _as_2d(params)
    f, dpar, diso = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    n = stick_direction(p[:, 3], p[:, 4])
    c = n @ scheme.directions.T
    cp = c * c if stick_exponent == "squared" else c
    b = scheme.bvalues[None, :]
    s = f * np.exp(-b * dpar * cp) + (1.0 - f) * np.exp(-b * diso)
    return _squeeze(s, single)


def ballstick_gradient(params, scheme: AcquisitionScheme, stick_exponent: str = "squared") -> np.ndarray:
    """Jacobian of :func:`ballstick_signal`, shape ``(N, T, 5)``."""
    p, single = _as_2d(params)
    f, dpar, diso = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    theta, phi = p[:, 3], p[:, 4]
    g = scheme.directions
    n = stick_direction(theta, phi)
    ct, st, cf, sf = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    dn_dtheta = np.stack([ct * cf, ct * sf, -st], axis=-1)
    dn_dphi = np.stack([-st * sf, st * cf, np.zeros_like(st)], axis=-1)
    c = n @ g.T
    b = scheme.bvalues[None, :]
    if stick_exponent == "squared":
        cp, dcp_dc = c * c, 2.0 * c
    else:
        cp, dcp_dc = c, np.ones_like(c)
    stick = np.exp(-b * dpar * cp)
    ball = np.exp(-b * diso)
    ds_dc = f * stick * (-b * dpar) * dcp_dc

    jac = np.empty(c.shape + (5,))
    jac[..., 0] = stick - ball
    jac[..., 1] = -f * stick * b * cp
    jac[..., 2] = -(1.0 - f) * ball * b
    jac[..., 3] = ds_dc * (dn_dtheta @ g.T)
    jac[..., 4] = ds_dc * (dn_dphi @ g.T)
    return _squeeze(jac, single)


# --------------------------------------------------------------------------
# Bounded parameterisation
# --------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class ParamTransform:
    """Scaled sigmoid maps from unconstrained reals onto open boxes."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise TransformError("bounds must be matching 1-D arrays")
        if np.any(lo >= hi):
            raise TransformError("every lower bound must be below its upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def to_physical(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return self.lower + self.width * _sigmoid(raw)

    def derivative(self, raw) -> np.ndarray:
        """Elementwise d(physical)/d(raw)."""
        sig = _sigmoid(np.asarray(raw, dtype=np.float64))
        return self.width * sig * (1.0 - sig)

    def from_physical(self, params) -> np.ndarray:
        x = np.asarray(params, dtype=np.float64)
        u = (x - self.lower) / self.width
        if np.any(u <= 0) or np.any(u >= 1) or not np.all(np.isfinite(u)):
            raise TransformError("parameters must lie strictly inside the bounds")
        return np.log(u) - np.log1p(-u)


def to_physical(transform: ParamTransform, raw) -> np.ndarray:
    return transform.to_physical(raw)


def from_physical(transform: ParamTransform, params) -> np.ndarray:
    return transform.from_physical(params)


# --------------------------------------------------------------------------
# Model registry
# --------------------------------------------------------------------------

class SignalModel:
    """A forward model with parameter names and default physical bounds."""

    name = ""
    param_names: tuple[str, ...] = ()
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @property
    def transform(self) -> ParamTransform:
        return ParamTransform(np.array(self.lower), np.array(self.upper))

    def signal(self, params, scheme):
        raise NotImplementedError

    def jacobian(self, params, scheme):
        raise NotImplementedError

    def config(self) -> dict:
        return {"name": self.name}


class Msdki(SignalModel):
    name = "msdki"
    param_names = ("D", "K")
    lower = (0.0, 0.0)
    upper = (4.0, 3.0)

    def signal(self, params, scheme):
        return msdki_signal(params, scheme)

    def jacobian(self, params, scheme):
        return msdki_gradient(params, scheme)


class BallStick(SignalModel):
    name = "ballstick"
    param_names = ("f", "Dpar", "Diso", "theta", "phi")
    lower = (0.0, 0.0, 0.0, 0.0, 0.0)
    upper = (1.0, 4.0, 4.0, np.pi, 2.0 * np.pi)

    def __init__(self, stick_exponent: str = "squared"):
        if stick_exponent not in ("squared", "linear"):
            raise ValueError(f"stick_exponent must be 'squared' or 'linear', not {stick_exponent!r}")
        self.stick_exponent = stick_exponent

    def signal(self, params, scheme):
        return ballstick_signal(params, scheme, self.stick_exponent)

    def jacobian(self, params, scheme):
        return ballstick_gradient(params, scheme, self.stick_exponent)

    def config(self) -> dict:
        return {"name": self.name, "stick_exponent": self.stick_exponent}


MODELS = {"msdki": Msdki, "ballstick": BallStick}


def get_model(name: str, **options) -> SignalModel:
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown signal model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**options)


def decode_with_grad(model: SignalModel, transform: ParamTransform, raw: np.ndarray,
                     scheme: AcquisitionScheme):
    """Map raw network outputs to signals.

    Returns ``(signals, params, backward)`` where ``backward(dL/dsignal)``
    gives ``dL/draw``.
    """
    params = transform.to_physical(raw)
    sig = model.signal(params, scheme)

    def backward(grad_signal):
        jac = model.jacobian(params, scheme)
        dparams = np.einsum("nt,ntm->nm", grad_signal, jac)
        return dparams * transform.derivative(raw)

    return sig, params, backward
