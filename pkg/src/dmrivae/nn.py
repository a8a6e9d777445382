"""Small dense networks with hand-written backprop, Adam, and latent-variable helpers.

Everything works on batches: inputs are ``(N, features)`` arrays and all
arithmetic is float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_VAR_RANGE = (-10.0, 10.0)

_ACTIVATIONS = ("relu", "identity")


class DenseNet:
    """Chain of affine layers, each followed by ``relu`` or ``identity``.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including input and output, e.g. ``(6, 64, 64, 2)``.
    activations : sequence of str, optional
        One per layer. Defaults to relu on hidden layers and identity on the
        output.
    rng : numpy.random.Generator, optional
        Used for He-normal weight initialisation.
    """

    def __init__(self, sizes, activations=None, rng=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers or any(a not in _ACTIVATIONS for a in activations):
            raise ValueError(f"need {n_layers} activations from {_ACTIVATIONS}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = sizes
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.in_dim:
            raise ValueError(f"input has {x.shape[1]} features, network expects {self.in_dim}")
        cache = []
        h = x
        for W, b, act in zip(self.weights, self.biases, self.activations):
            pre = h @ W + b
            cache.append((h, pre))
            h = np.maximum(pre, 0.0) if act == "relu" else pre
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Backpropagate ``dL/doutput``.

        Returns
        -------
        grads : list of ndarray
            Same order as :attr:`params`.
        grad_in : ndarray
            ``dL/dinput``.
        """
        grad = np.asarray(grad_out, dtype=np.float64)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            h, pre = cache[i]
            if self.activations[i] == "relu":
                grad = grad * (pre > 0)
            grads[2 * i] = h.T @ grad
            grads[2 * i + 1] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grads, grad

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": self.activations,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        net = cls(d["sizes"], d["activations"])
        net.weights = [np.array(W, dtype=np.float64).reshape(i, o)
                       for W, i, o in zip(d["weights"], net.sizes[:-1], net.sizes[1:])]
        net.biases = [np.array(b, dtype=np.float64) for b in d["biases"]]
        return net


def forward(net: DenseNet, x):
    return net.forward(x)


def backward(net: DenseNet, cache, grad_out):
    return net.backward(cache, grad_out)


# --------------------------------------------------------------------------
# Latent variables
# --------------------------------------------------------------------------

@dataclass
class GaussianLatent:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var)

    @classmethod
    def from_head(cls, head: np.ndarray) -> tuple["GaussianLatent", np.ndarray]:
        """Split an encoder head ``[mu | log_var]`` and clamp log_var.

        Also returns the mask of log_var entries inside the clamp range
        (where gradients pass).
        """
        L = head.shape[-1] // 2
        raw_lv = head[..., L:]
        lo, hi = LOG_VAR_RANGE
        return cls(head[..., :L], np.clip(raw_lv, lo, hi)), (raw_lv > lo) & (raw_lv < hi)


def reparameterize(latent: GaussianLatent, eps) -> np.ndarray:
    """``z = mu + exp(log_var / 2) * eps``."""
    return latent.mu + latent.sigma * eps


def reparameterize_backward(latent: GaussianLatent, eps, grad_z):
    """Return ``(dL/dmu, dL/dlog_var)`` given ``dL/dz``."""
    return grad_z, grad_z * 0.5 * latent.sigma * eps


def softmax(logits, axis=-1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def softmax_backward(probs, grad_probs, tau: float = 1.0):
    """Gradient through ``probs = softmax(x / tau)`` with respect to ``x``."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner) / tau


def gumbel_softmax(logits, tau: float, u) -> np.ndarray:
    """Relaxed categorical sample ``softmax((logits + g) / tau)``, ``g = -log(-log u)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("uniform draws must lie in the open interval (0, 1)")
    g = -np.log(-np.log(u))
    return softmax((np.asarray(logits, dtype=np.float64) + g) / tau)


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    u = rng.random(shape)
    return np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


# --------------------------------------------------------------------------
# KL divergences (row-wise over the last axis)
# --------------------------------------------------------------------------

def kl_gaussian_std(latent: GaussianLatent) -> np.ndarray:
    """``KL(N(mu, sigma^2) || N(0, 1))`` summed over latent dimensions."""
    mu, lv = latent.mu, latent.log_var
    return 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=-1)


def kl_gaussian_std_grad(latent: GaussianLatent):
    return latent.mu, 0.5 * (np.exp(latent.log_var) - 1.0)


def kl_gaussian_pair(q: GaussianLatent, p: GaussianLatent) -> np.ndarray:
    """``KL(q || p)`` for diagonal Gaussians, summed over the last axis."""
    var_q = np.exp(q.log_var)
    inv_var_p = np.exp(-p.log_var)
    diff = q.mu - p.mu
    return 0.5 * np.sum(p.log_var - q.log_var + (var_q + diff * diff) * inv_var_p - 1.0, axis=-1)


def kl_gaussian_pair_grad(q: GaussianLatent, p: GaussianLatent):
    """Gradients of :func:`kl_gaussian_pair` w.r.t. (q.mu, q.log_var, p.mu, p.log_var)."""
    var_q = np.exp(q.log_var)
    inv_var_p = np.exp(-p.log_var)
    diff = q.mu - p.mu
    d_mu_q = diff * inv_var_p
    d_lv_q = 0.5 * (var_q * inv_var_p - 1.0)
    d_lv_p = 0.5 * (1.0 - (var_q + diff * diff) * inv_var_p)
    return d_mu_q, d_lv_q, -d_mu_q, d_lv_p


def kl_categorical(probs, prior) -> np.ndarray:
    """``sum_k p_k log(p_k / prior_k)`` with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    q = np.asarray(prior, dtype=np.float64)
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def kl_categorical_logits(logits, prior):
    """KL of ``softmax(logits)`` from ``prior`` and its gradient w.r.t. the logits."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    logq = np.log(np.asarray(prior, dtype=np.float64))
    kl = np.sum(p * (logp - logq), axis=-1)
    grad = p * (logp - logq - kl[..., None])
    return kl, grad


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step,
                "m": [{"shape": list(a.shape), "data": a.ravel().tolist()} for a in self.m],
                "v": [{"shape": list(a.shape), "data": a.ravel().tolist()} for a in self.v]}

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        def arrays(items):
            return [np.array(it["data"], dtype=np.float64).reshape(it["shape"]) for it in items]
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
                   arrays(d["m"]), arrays(d["v"]))


def clip_grad_norm(grads: list, max_norm: float | None):
    """Scale ``grads`` so their global L2 norm is at most ``max_norm``; returns ``(grads, norm)``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is None or max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def adam_step(params: list, grads: list, state: AdamState):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, nets: dict, arrays: dict | None = None, adam: AdamState | None = None,
                    rng: np.random.Generator | None = None, extra: dict | None = None) -> None:
    """JSON container with network shapes, float64 parameters, optimizer and RNG state."""
    doc = {
        "format": "dmrivae-checkpoint",
        "version": CHECKPOINT_VERSION,
        "nets": {name: net.to_dict() for name, net in nets.items()},
        "arrays": {k: {"shape": list(np.shape(a)), "data": np.ravel(a).tolist()}
                   for k, a in (arrays or {}).items()},
        "adam": adam.to_dict() if adam is not None else None,
        "rng": rng.bit_generator.state if rng is not None else None,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "dmrivae-checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    if doc["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {doc['version']} is newer than supported")
    out = {
        "nets": {k: DenseNet.from_dict(v) for k, v in doc["nets"].items()},
        "arrays": {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in doc["arrays"].items()},
        "adam": AdamState.from_dict(doc["adam"]) if doc["adam"] else None,
        "rng": None,
        "extra": doc.get("extra", {}),
    }
    if doc["rng"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng"]
        out["rng"] = rng
    return out
