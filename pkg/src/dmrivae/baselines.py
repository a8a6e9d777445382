"""Voxelwise baseline fitters: Levenberg-Marquardt least squares and a self-supervised MLP."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .nn import AdamState, DenseNet, adam_step, clip_grad_norm
from .signal_models import SignalModel, decode_with_grad, get_model
from .simulator import VoxelDataset, read_csv, write_csv

logger = logging.getLogger(__name__)


class FitDivergence(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class FitResult:
    params: np.ndarray
    residual_rmse: np.ndarray
    fitter_id: str
    param_names: tuple
    model: str
    wall_time: float = 0.0
    config: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @property
    def n_voxels(self) -> int:
        return int(self.params.shape[0])

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "params.csv", self.params)
        write_csv(out / "residuals.csv", self.residual_rmse)
        meta = {
            "fitter": self.fitter_id,
            "model": self.model,
            "param_names": list(self.param_names),
            "n_voxels": self.n_voxels,
            "wall_time": self.wall_time,
            "config": self.config,
            "info": self.info,
            "version": __version__,
        }
        with open(out / "meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        return out

    @classmethod
    def load(cls, directory) -> "FitResult":
        d = Path(directory)
        with open(d / "meta.json") as fh:
            meta = json.load(fh)
        params = read_csv(d / "params.csv")
        res = read_csv(d / "residuals.csv").reshape(-1) if (d / "residuals.csv").exists() \
            else np.zeros(params.shape[0])
        return cls(params, res, meta["fitter"], tuple(meta["param_names"]), meta["model"],
                   meta.get("wall_time", 0.0), meta.get("config", {}), meta.get("info", {}))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _check_signals(dataset: VoxelDataset) -> None:
    if dataset.n_voxels == 0:
        raise ValueError("dataset is empty")
    if not np.all(np.isfinite(dataset.signals)):
        raise ValueError("signals contain non-finite values")


def residual_rmse(model: SignalModel, params, dataset: VoxelDataset) -> np.ndarray:
    pred = model.signal(params, dataset.scheme)
    return np.sqrt(np.mean((pred - dataset.signals) ** 2, axis=1))


# --------------------------------------------------------------------------
# Levenberg-Marquardt
# --------------------------------------------------------------------------

def levenberg_marquardt(predict, x0, y, max_iter: int = 200, tol: float = 1e-10,
                        lam0: float = 1e-3, lam_up: float = 10.0, lam_down: float = 10.0,
                        lam_max: float = 1e16):
    """Batched Levenberg-Marquardt on independent problems.

    Parameters
    ----------
    predict : callable
        ``predict(x, rows) -> (prediction, jacobian)`` with shapes ``(n, T)``
        and ``(n, T, M)`` for the problems selected by ``rows``.
    x0 : ndarray, shape (N, M)
    y : ndarray, shape (N, T)

    Returns
    -------
    x : ndarray
    cost : ndarray
        Final sum of squared residuals per problem.
    n_iter : ndarray

    Notes
    -----
    A step is accepted only if it strictly lowers the cost, so the cost of
    every problem is non-increasing across iterations.
    """
    x = np.array(x0, dtype=np.float64)
    N, M = x.shape
    all_rows = np.arange(N)
    pred, jac = predict(x, all_rows)
    r = pred - y
    cost = np.sum(r * r, axis=1)
    lam = np.full(N, lam0)
    active = np.isfinite(cost)
    n_iter = np.zeros(N, dtype=np.int64)
    eye = np.eye(M)

    for _ in range(max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        J = jac[rows]
        JtJ = np.einsum("ntm,ntk->nmk", J, J)
        g = np.einsum("ntm,nt->nm", J, r[rows])
        diag = np.einsum("nmm->nm", JtJ)
        A = JtJ + lam[rows, None, None] * (diag[:, :, None] * eye + 1e-12 * eye)
        try:
            delta = np.linalg.solve(A, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.stack([np.linalg.lstsq(a, -b, rcond=None)[0] for a, b in zip(A, g)])
        x_try = x[rows] + delta
        pred_try, jac_try = predict(x_try, rows)
        r_try = pred_try - y[rows]
        cost_try = np.sum(r_try * r_try, axis=1)
        n_iter[rows] += 1

        ok = np.isfinite(cost_try) & (cost_try < cost[rows])
        acc = rows[ok]
        rel = (cost[acc] - cost_try[ok]) / np.maximum(cost[acc], np.finfo(float).tiny)
        x[acc] = x_try[ok]
        r[acc] = r_try[ok]
        jac[acc] = jac_try[ok]
        cost[acc] = cost_try[ok]
        lam[acc] = lam[acc] / lam_down
        done = (rel < tol) | (cost_try[ok] == 0.0)
        active[acc[done]] = False

        rej = rows[~ok]
        lam[rej] = lam[rej] * lam_up
        active[rej[lam[rej] > lam_max]] = False
    return x, cost, n_iter


def default_starts(model: SignalModel) -> np.ndarray:
    """Five fixed initial points spread over the physical box of ``model``."""
    if model.name == "msdki":
        return np.array([[0.5, 0.5], [1.0, 1.0], [1.5, 1.5], [2.5, 0.3], [3.5, 0.1]])
    if model.name == "ballstick":
        pi = np.pi
        return np.array([
            [0.5, 1.5, 2.0, pi / 4, pi / 4],
            [0.3, 1.0, 1.0, pi / 2, 0.1],
            [0.7, 2.5, 3.0, pi / 2, pi / 2],
            [0.4, 2.0, 2.5, 3 * pi / 4, pi],
            [0.6, 1.2, 1.5, pi / 3, 3 * pi / 2],
        ])
    lo, hi = np.array(model.lower), np.array(model.upper)
    return lo + (hi - lo) * ((np.arange(5)[:, None] + 0.5) / 5.0)


def fit_lsq(dataset: VoxelDataset, model="msdki", config: Optional[dict] = None) -> FitResult:
    """Per-voxel nonlinear least squares in sigmoid-transformed coordinates.

    Each voxel is fitted from every start in :func:`default_starts`; the
    run with the lowest final cost is kept.
    """
    cfg = {"max_iter": 200, "tol": 1e-10, "lam0": 1e-3, "threads": 1, "chunk": 4096}
    cfg.update(config or {})
    model = get_model(model) if isinstance(model, str) else model
    _check_signals(dataset)
    t0 = time.perf_counter()
    transform = model.transform
    scheme = dataset.scheme
    starts = transform.from_physical(default_starts(model))
    S = starts.shape[0]

    def solve_chunk(sl):
        y = dataset.signals[sl]
        n = y.shape[0]
        x0 = np.repeat(starts[None], n, axis=0).reshape(n * S, -1)
        yy = np.repeat(y, S, axis=0)

        def predict(raw, rows):
            p = transform.to_physical(raw)
            jac = model.jacobian(p, scheme) * transform.derivative(raw)[:, None, :]
            return model.signal(p, scheme), jac

        x, cost, iters = levenberg_marquardt(predict, x0, yy, cfg["max_iter"], cfg["tol"], cfg["lam0"])
        cost = np.where(np.isfinite(cost), cost, np.inf).reshape(n, S)
        best = np.argmin(cost, axis=1)
        x = x.reshape(n, S, -1)[np.arange(n), best]
        return x, iters.reshape(n, S)[np.arange(n), best]

    N = dataset.n_voxels
    chunks = [slice(i, min(i + cfg["chunk"], N)) for i in range(0, N, cfg["chunk"])]
    if cfg["threads"] > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg["threads"]) as pool:
            parts = list(pool.map(solve_chunk, chunks))
    else:
        parts = [solve_chunk(c) for c in chunks]
    raw = np.concatenate([p[0] for p in parts])
    iters = np.concatenate([p[1] for p in parts])
    params = transform.to_physical(raw)
    rel_pos = (params - transform.lower) / transform.width
    at_bound = np.any((rel_pos < 1e-6) | (rel_pos > 1 - 1e-6), axis=1)
    if at_bound.any():
        logger.info("%d voxels converged to a parameter bound (degenerate fits)", at_bound.sum())
    return FitResult(params, residual_rmse(model, params, dataset), "lsq", model.param_names,
                     model.name, time.perf_counter() - t0, cfg,
                     {"n_at_bound": int(at_bound.sum()), "mean_iterations": float(iters.mean())})


def init_output_layer(net: DenseNet, model: SignalModel, fraction: float = 0.25,
                      weight_scale: float = 0.1) -> None:
    """Start a parameter head near a benign point of the physical box.

    Random heads spread initial estimates over the whole box, where the
    MSDKI signal can be astronomically large and the sigmoid saturates.
    """
    tr = model.transform
    net.biases[-1][:] = tr.from_physical(tr.lower + fraction * tr.width)
    net.weights[-1] *= weight_scale


# --------------------------------------------------------------------------
# Self-supervised voxelwise network
# --------------------------------------------------------------------------

SELFSUP_DEFAULTS = {"hidden": 64, "epochs": 300, "batch_size": 256, "lr": 1e-3, "grad_clip": 1.0,
                    "seed": 0}


class SelfSupervisedNet:
    """MLP mapping one voxel's signals to model parameters, trained on signal reconstruction."""

    def __init__(self, model: SignalModel, n_meas: int, hidden: int = 64,
                 rng: Optional[np.random.Generator] = None):
        self.model = model
        self.transform = model.transform
        self.net = DenseNet([n_meas, hidden, hidden, model.n_params], rng=rng)
        init_output_layer(self.net, model)

    def predict(self, signals) -> np.ndarray:
        return self.transform.to_physical(self.net(signals))

    def loss_and_grads(self, x, scheme):
        raw, cache = self.net.forward(x)
        pred, _, back = decode_with_grad(self.model, self.transform, raw, scheme)
        r = pred - x
        loss = float(np.mean(r * r))
        grads, _ = self.net.backward(cache, back(2.0 * r / r.size))
        return loss, grads

    def fit(self, dataset: VoxelDataset, epochs: int, batch_size: int, lr: float,
            rng: np.random.Generator, grad_clip: Optional[float] = None) -> list[float]:
        adam = AdamState(lr=lr)
        params = self.net.params
        N = dataset.n_voxels
        history = []
        for epoch in range(epochs):
            order = rng.permutation(N)
            total = 0.0
            for start in range(0, N, batch_size):
                idx = order[start:start + batch_size]
                loss, grads = self.loss_and_grads(dataset.signals[idx], dataset.scheme)
                if not np.isfinite(loss):
                    raise FitDivergence(f"non-finite loss at epoch {epoch}")
                grads, _ = clip_grad_norm(grads, grad_clip)
                adam_step(params, grads, adam)
                total += loss * idx.size
            history.append(total / N)
        return history


def fit_selfsupervised(dataset: VoxelDataset, model="msdki", config: Optional[dict] = None) -> FitResult:
    """Voxelwise self-supervised fit with a three-layer fully connected network."""
    cfg = dict(SELFSUP_DEFAULTS)
    cfg.update(config or {})
    model = get_model(model) if isinstance(model, str) else model
    _check_signals(dataset)
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg["seed"])
    fitter = SelfSupervisedNet(model, dataset.scheme.T, cfg["hidden"], rng)
    history = fitter.fit(dataset, cfg["epochs"], cfg["batch_size"], cfg["lr"], rng, cfg["grad_clip"])
    params = fitter.predict(dataset.signals)
    if not np.all(np.isfinite(params)):
        raise FitDivergence("non-finite parameter estimates")
    info = {"final_loss": history[-1] if history else None}
    result = FitResult(params, residual_rmse(model, params, dataset), "selfsup",
                       model.param_names, model.name, time.perf_counter() - t0, cfg, info)
    result.network = fitter
    return result
