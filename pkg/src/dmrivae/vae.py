"""Variational autoencoder fitters with a physics decoder.

Both models share one latent space across all voxels. The encoder maps a
voxel's signals to a Gaussian posterior over ``z``; a single linear layer
maps ``z`` to unconstrained model parameters, which the sigmoid transform
and the closed-form signal model turn back into signals.

``VaeUniG`` uses a standard normal prior. ``VaeGmm`` adds a relaxed
categorical mixing variable (Gumbel-softmax) that is fed, together with
the signals, into a second encoder; the prior on ``z`` is a mixture of
learnable diagonal Gaussians.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import FitDivergence, FitResult, init_output_layer, residual_rmse
from .nn import (
    AdamState,
    DenseNet,
    GaussianLatent,
    adam_step,
    clip_grad_norm,
    gumbel_softmax,
    kl_categorical_logits,
    kl_gaussian_pair,
    kl_gaussian_pair_grad,
    kl_gaussian_std,
    kl_gaussian_std_grad,
    load_checkpoint,
    reparameterize,
    reparameterize_backward,
    save_checkpoint,
    softmax,
    softmax_backward,
    uniform_open,
)
from .signal_models import SignalModel, decode_with_grad, get_model
from .simulator import VoxelDataset

logger = logging.getLogger(__name__)

VAE_DEFAULTS = {
    "latent_dim": 2,
    "n_components": 3,
    "hidden": 64,
    "beta": 3e-4,
    "epochs": 500,
    "batch_size": 256,
    "tau": 0.5,
    "lr": 1e-3,
    "mc_samples": 1,
    "grad_clip": 1.0,
    "prior_jitter": 0.1,
}


@dataclass
class ElboTerms:
    loss: float
    recon: float
    kl_z: float
    kl_y: float = 0.0


@dataclass
class LatentPosterior:
    mu: np.ndarray
    log_var: np.ndarray
    c: Optional[np.ndarray] = None

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @property
    def n_voxels(self) -> int:
        return int(self.mu.shape[0])


class VaeUniG:
    """VAE with a standard normal prior on the latent code."""

    kind = "unig"

    def __init__(self, model: SignalModel, n_meas: int, latent_dim: int = 2, hidden: int = 64,
                 beta: float = 3e-4, rng: Optional[np.random.Generator] = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.model = model
        self.transform = model.transform
        self.latent_dim = latent_dim
        self.beta = beta
        self.encoder = DenseNet([n_meas, hidden, hidden, 2 * latent_dim], rng=rng)
        self.decoder = DenseNet([latent_dim, model.n_params], ["identity"], rng=rng)
        init_output_layer(self.decoder, model)

    @property
    def params(self) -> list[np.ndarray]:
        return self.encoder.params + self.decoder.params

    def encode(self, x) -> GaussianLatent:
        return GaussianLatent.from_head(self.encoder(x))[0]

    def decode(self, z) -> np.ndarray:
        return self.transform.to_physical(self.decoder(z))

    def posterior(self, x) -> LatentPosterior:
        lat = self.encode(x)
        return LatentPosterior(lat.mu, lat.log_var)

    def predict(self, x) -> np.ndarray:
        """Parameters decoded from the posterior mean; no sampling."""
        return self.decode(self.encode(x).mu)

    def sample_noise(self, n: int, rng: np.random.Generator) -> dict:
        return {"eps": rng.standard_normal((n, self.latent_dim))}

    def elbo(self, x, scheme, noise: dict, with_grad: bool = True):
        """Single-sample ELBO loss ``MSE + beta * KL`` and its parameter gradients."""
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        eps = noise["eps"]
        head, enc_cache = self.encoder.forward(x)
        lat, lv_mask = GaussianLatent.from_head(head)
        z = reparameterize(lat, eps)
        raw, dec_cache = self.decoder.forward(z)
        pred, _, back = decode_with_grad(self.model, self.transform, raw, scheme)
        r = pred - x
        recon = float(np.mean(r * r))
        kl = float(np.mean(kl_gaussian_std(lat)))
        terms = ElboTerms(recon + self.beta * kl, recon, kl)
        if not with_grad:
            return terms, None

        g_raw = back(2.0 * r / r.size)
        dec_grads, g_z = self.decoder.backward(dec_cache, g_raw)
        g_mu, g_lv = reparameterize_backward(lat, eps, g_z)
        k_mu, k_lv = kl_gaussian_std_grad(lat)
        g_mu = g_mu + self.beta * k_mu / n
        g_lv = (g_lv + self.beta * k_lv / n) * lv_mask
        enc_grads, _ = self.encoder.backward(enc_cache, np.concatenate([g_mu, g_lv], axis=1))
        return terms, enc_grads + dec_grads

    def state(self) -> tuple[dict, dict]:
        return {"encoder": self.encoder, "decoder": self.decoder}, {}

    def load_state(self, nets: dict, arrays: dict) -> None:
        self.encoder, self.decoder = nets["encoder"], nets["decoder"]


class VaeGmm:
    """VAE whose latent prior is a mixture of learnable Gaussians."""

    kind = "gmm"

    def __init__(self, model: SignalModel, n_meas: int, latent_dim: int = 2, n_components: int = 3,
                 hidden: int = 64, beta: float = 3e-4, tau: float = 0.5, prior_jitter: float = 0.1,
                 rng: Optional[np.random.Generator] = None):
        if n_components < 1:
            raise ValueError("need at least one mixture component")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        rng = np.random.default_rng(0) if rng is None else rng
        self.model = model
        self.transform = model.transform
        self.latent_dim = latent_dim
        self.n_components = n_components
        self.beta = beta
        self.tau = tau
        self.encoder1 = DenseNet([n_meas, hidden, n_components], rng=rng)
        self.encoder2 = DenseNet([n_meas + n_components, hidden, 2 * latent_dim], rng=rng)
        self.decoder = DenseNet([latent_dim, model.n_params], ["identity"], rng=rng)
        init_output_layer(self.decoder, model)
        self.prior_mu = prior_jitter * rng.standard_normal((n_components, latent_dim))
        self.prior_log_var = np.zeros((n_components, latent_dim))

    @property
    def params(self) -> list[np.ndarray]:
        return (self.encoder1.params + self.encoder2.params + self.decoder.params
                + [self.prior_mu, self.prior_log_var])

    @property
    def mixture_prior(self) -> np.ndarray:
        return np.full(self.n_components, 1.0 / self.n_components)

    def mixing(self, x) -> np.ndarray:
        """Deterministic mixing vector ``softmax(logits / tau)``."""
        return softmax(self.encoder1(x) / self.tau)

    def posterior(self, x) -> LatentPosterior:
        c = self.mixing(x)
        lat = GaussianLatent.from_head(self.encoder2(np.concatenate([x, c], axis=1)))[0]
        return LatentPosterior(lat.mu, lat.log_var, c)

    def decode(self, z) -> np.ndarray:
        return self.transform.to_physical(self.decoder(z))

    def predict(self, x) -> np.ndarray:
        return self.decode(self.posterior(x).mu)

    def sample_noise(self, n: int, rng: np.random.Generator) -> dict:
        return {"eps": rng.standard_normal((n, self.latent_dim)),
                "u": uniform_open(rng, (n, self.n_components))}

    def elbo(self, x, scheme, noise: dict, with_grad: bool = True):
        """Mixture ELBO ``MSE + beta * (KL_z + KL_y)``.

        ``KL_z`` weights the KL to each prior component by the mixing
        probabilities ``softmax(logits)``; ``KL_y`` is the KL of those
        probabilities from the uniform mixture prior.
        """
        x = np.asarray(x, dtype=np.float64)
        n, T = x.shape
        eps, u = noise["eps"], noise["u"]
        logits, c1_cache = self.encoder1.forward(x)
        c = gumbel_softmax(logits, self.tau, u)
        head, c2_cache = self.encoder2.forward(np.concatenate([x, c], axis=1))
        lat, lv_mask = GaussianLatent.from_head(head)
        z = reparameterize(lat, eps)
        raw, dec_cache = self.decoder.forward(z)
        pred, _, back = decode_with_grad(self.model, self.transform, raw, scheme)
        r = pred - x
        recon = float(np.mean(r * r))

        q = GaussianLatent(lat.mu[:, None, :], lat.log_var[:, None, :])
        p = GaussianLatent(self.prior_mu[None], self.prior_log_var[None])
        kl_comp = kl_gaussian_pair(q, p)                 # (n, Kc)
        chat = softmax(logits)
        kl_z = float(np.mean(np.sum(chat * kl_comp, axis=1)))
        kl_y_rows, g_logits_y = kl_categorical_logits(logits, self.mixture_prior)
        kl_y = float(np.mean(kl_y_rows))
        terms = ElboTerms(recon + self.beta * (kl_z + kl_y), recon, kl_z, kl_y)
        if not with_grad:
            return terms, None

        w = self.beta / n
        g_raw = back(2.0 * r / r.size)
        dec_grads, g_z = self.decoder.backward(dec_cache, g_raw)
        g_mu, g_lv = reparameterize_backward(lat, eps, g_z)
        d_mu_q, d_lv_q, d_mu_p, d_lv_p = kl_gaussian_pair_grad(q, p)
        cw = (w * chat)[:, :, None]
        g_mu = g_mu + np.sum(cw * d_mu_q, axis=1)
        g_lv = (g_lv + np.sum(cw * d_lv_q, axis=1)) * lv_mask
        g_prior_mu = np.sum(cw * d_mu_p, axis=0)
        g_prior_lv = np.sum(cw * d_lv_p, axis=0)

        enc2_grads, g_in = self.encoder2.backward(c2_cache, np.concatenate([g_mu, g_lv], axis=1))
        g_logits = softmax_backward(c, g_in[:, T:], self.tau)
        g_logits += softmax_backward(chat, w * kl_comp)
        g_logits += w * g_logits_y
        enc1_grads, _ = self.encoder1.backward(c1_cache, g_logits)
        return terms, enc1_grads + enc2_grads + dec_grads + [g_prior_mu, g_prior_lv]

    def state(self) -> tuple[dict, dict]:
        return ({"encoder1": self.encoder1, "encoder2": self.encoder2, "decoder": self.decoder},
                {"prior_mu": self.prior_mu, "prior_log_var": self.prior_log_var})

    def load_state(self, nets: dict, arrays: dict) -> None:
        self.encoder1, self.encoder2 = nets["encoder1"], nets["encoder2"]
        self.decoder = nets["decoder"]
        self.prior_mu = arrays["prior_mu"]
        self.prior_log_var = arrays["prior_log_var"]


def elbo_unig(model: VaeUniG, batch, scheme, rng: np.random.Generator):
    """Return ``(loss, recon, kl)`` for one Monte Carlo sample."""
    terms, _ = model.elbo(batch, scheme, model.sample_noise(len(batch), rng), with_grad=False)
    return terms.loss, terms.recon, terms.kl_z


def elbo_gmm(model: VaeGmm, batch, scheme, rng: np.random.Generator):
    """Return ``(loss, recon, kl_z, kl_y)`` for one Monte Carlo sample."""
    terms, _ = model.elbo(batch, scheme, model.sample_noise(len(batch), rng), with_grad=False)
    return terms.loss, terms.recon, terms.kl_z, terms.kl_y


def build_vae(kind: str, model: SignalModel, n_meas: int, cfg: dict, rng: np.random.Generator):
    if kind == "unig":
        return VaeUniG(model, n_meas, cfg["latent_dim"], cfg["hidden"], cfg["beta"], rng)
    if kind == "gmm":
        return VaeGmm(model, n_meas, cfg["latent_dim"], cfg["n_components"], cfg["hidden"],
                      cfg["beta"], cfg["tau"], cfg["prior_jitter"], rng)
    raise ValueError(f"unknown VAE kind {kind!r}; use 'unig' or 'gmm'")


def train_vae(kind: str, dataset: VoxelDataset, model="msdki", config: Optional[dict] = None,
              seed: Optional[int] = None):
    """Train a VAE fitter with minibatch Adam and decode posterior means.

    Returns
    -------
    vae : VaeUniG or VaeGmm
    result : FitResult
    posterior : LatentPosterior
    """
    cfg = dict(VAE_DEFAULTS)
    cfg.update(config or {})
    if seed is None:
        seed = cfg.get("seed", 0)
    cfg["seed"] = seed
    model = get_model(model) if isinstance(model, str) else model
    if dataset.n_voxels == 0:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    vae = build_vae(kind, model, dataset.scheme.T, cfg, rng)
    params = vae.params
    adam = AdamState(lr=cfg["lr"])
    N = dataset.n_voxels
    S = int(cfg["mc_samples"])
    history = []
    for epoch in range(cfg["epochs"]):
        order = rng.permutation(N)
        sums = np.zeros(4)
        for start in range(0, N, cfg["batch_size"]):
            idx = order[start:start + cfg["batch_size"]]
            x = dataset.signals[idx]
            if S > 1:
                x = np.tile(x, (S, 1))
            terms, grads = vae.elbo(x, dataset.scheme, vae.sample_noise(len(x), rng))
            if not np.isfinite(terms.loss):
                raise FitDivergence(f"non-finite ELBO at epoch {epoch}")
            grads, _ = clip_grad_norm(grads, cfg["grad_clip"])
            adam_step(params, grads, adam)
            sums += idx.size * np.array([terms.loss, terms.recon, terms.kl_z, terms.kl_y])
        history.append((sums / N).tolist())

    post = vae.posterior(dataset.signals)
    est = vae.decode(post.mu)
    if not np.all(np.isfinite(est)):
        raise FitDivergence("non-finite parameter estimates")
    info = {}
    if history:
        info = dict(zip(("final_loss", "final_recon", "final_kl_z", "final_kl_y"), history[-1]))
    fitter_id = "vae-unig" if kind == "unig" else "vae-gmm"
    result = FitResult(est, residual_rmse(model, est, dataset), fitter_id, model.param_names,
                       model.name, time.perf_counter() - t0, cfg, info)
    vae.history = history
    vae.adam = adam
    vae.rng = rng
    return vae, result, post


def save_vae(vae, path) -> None:
    nets, arrays = vae.state()
    extra = {"kind": vae.kind, "model": vae.model.config(), "latent_dim": vae.latent_dim,
             "beta": vae.beta}
    if vae.kind == "gmm":
        extra.update(n_components=vae.n_components, tau=vae.tau)
    save_checkpoint(path, nets, arrays, getattr(vae, "adam", None), getattr(vae, "rng", None), extra)


def load_vae(path):
    ck = load_checkpoint(path)
    extra = ck["extra"]
    mcfg = dict(extra["model"])
    model = get_model(mcfg.pop("name"), **mcfg)
    nets = ck["nets"]
    if extra["kind"] == "unig":
        enc = nets["encoder"]
        vae = VaeUniG(model, enc.in_dim, extra["latent_dim"], enc.sizes[1], extra["beta"])
    else:
        enc1 = nets["encoder1"]
        vae = VaeGmm(model, enc1.in_dim, extra["latent_dim"], extra["n_components"],
                     enc1.sizes[1], extra["beta"], extra["tau"])
    vae.load_state(nets, ck["arrays"])
    vae.adam, vae.rng = ck["adam"], ck["rng"]
    return vae


# --------------------------------------------------------------------------
# Latent export
# --------------------------------------------------------------------------

def latent_columns(latent_dim: int, n_components: Optional[int]) -> list[str]:
    cols = [f"mu_{i}" for i in range(latent_dim)] + [f"sigma_{i}" for i in range(latent_dim)]
    if n_components:
        cols += [f"c_{k}" for k in range(n_components)]
    return cols


def export_latent(posterior: LatentPosterior, path, bins: int = 50) -> list[Path]:
    """Write per-voxel posterior statistics plus histogram summaries.

    Creates ``path`` (one row per voxel) and, next to it,
    ``<stem>_hist1d.csv`` (per-dimension histograms of mu) and
    ``<stem>_hist2d.csv`` (joint histogram of the first two mu dimensions).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    L = posterior.mu.shape[1] if posterior.mu.ndim == 2 else 0
    Kc = posterior.c.shape[1] if posterior.c is not None else None
    cols = latent_columns(L, Kc)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        blocks = [posterior.mu, posterior.sigma] + ([posterior.c] if posterior.c is not None else [])
        for row in np.concatenate(blocks, axis=1) if posterior.n_voxels else []:
            w.writerow([repr(float(v)) for v in row])
    written = [path]
    if posterior.n_voxels == 0:
        return written

    h1 = path.with_name(path.stem + "_hist1d.csv")
    with open(h1, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dim", "bin_left", "bin_right", "count"])
        for d in range(L):
            counts, edges = np.histogram(posterior.mu[:, d], bins=bins)
            for k in range(bins):
                w.writerow([d, repr(float(edges[k])), repr(float(edges[k + 1])), int(counts[k])])
    written.append(h1)
    if L >= 2:
        h2 = path.with_name(path.stem + "_hist2d.csv")
        counts, xe, ye = np.histogram2d(posterior.mu[:, 0], posterior.mu[:, 1], bins=bins)
        with open(h2, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x_left", "x_right", "y_left", "y_right", "count"])
            for i in range(bins):
                for j in range(bins):
                    w.writerow([repr(float(xe[i])), repr(float(xe[i + 1])),
                                repr(float(ye[j])), repr(float(ye[j + 1])), int(counts[i, j])])
        written.append(h2)
    return written
