import csv

import numpy as np
import pytest

from dmrivae.acquisition import scheme_for_simulation
from dmrivae.nn import GaussianLatent, kl_gaussian_pair
from dmrivae.signal_models import Msdki
from dmrivae.simulator import default_clusters, simulate
from dmrivae.vae import (
    LatentPosterior,
    VaeGmm,
    VaeUniG,
    elbo_gmm,
    elbo_unig,
    export_latent,
    load_vae,
    save_vae,
    train_vae,
)

SMALL_B = [0.0, 0.25, 0.5, 0.75, 1.0]


def _small_batch(seed, n=3):
    sch = scheme_for_simulation(SMALL_B)
    ds = simulate(default_clusters(), n, sch, 20.0, seed=seed)
    return ds.signals, sch


def _randomize_biases(vae, rng):
    # zero biases can leave pre-activations exactly on the relu kink
    for net in [v for v in vars(vae).values() if hasattr(v, "biases")]:
        for b in net.biases:
            b += rng.normal(0, 0.1, b.shape)


def _fd_check(vae, x, sch, noise):
    _, grads = vae.elbo(x, sch, noise)
    h = 1e-6
    worst = 0.0
    for p, g in zip(vae.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = vae.elbo(x, sch, noise, with_grad=False)[0].loss
            p[idx] = old - h
            dn = vae.elbo(x, sch, noise, with_grad=False)[0].loss
            p[idx] = old
            fd = (up - dn) / (2 * h)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6)
            worst = max(worst, err)
    return worst


@pytest.mark.parametrize("seed", range(20))
def test_elbo_unig_gradients(seed):
    rng = np.random.default_rng(seed)
    x, sch = _small_batch(seed)
    vae = VaeUniG(Msdki(), sch.T, latent_dim=2, hidden=4, beta=0.5, rng=rng)
    _randomize_biases(vae, rng)
    assert _fd_check(vae, x, sch, vae.sample_noise(len(x), rng)) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_elbo_gmm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, sch = _small_batch(seed)
    vae = VaeGmm(Msdki(), sch.T, latent_dim=2, n_components=2, hidden=4, beta=0.5, tau=0.5,
                 prior_jitter=0.3, rng=rng)
    vae.prior_log_var[:] = rng.normal(0, 0.3, vae.prior_log_var.shape)
    _randomize_biases(vae, rng)
    assert _fd_check(vae, x, sch, vae.sample_noise(len(x), rng)) < 1e-4


def test_elbo_decomposition_and_nonnegative_kl():
    x, sch = _small_batch(0, 50)
    rng = np.random.default_rng(0)
    for vae in (VaeUniG(Msdki(), sch.T, beta=0.3, rng=rng),
                VaeGmm(Msdki(), sch.T, beta=0.3, rng=rng)):
        for _ in range(5):
            t, _ = vae.elbo(x, sch, vae.sample_noise(len(x), rng), with_grad=False)
            assert t.loss == pytest.approx(t.recon + vae.beta * (t.kl_z + t.kl_y), abs=1e-9)
            assert t.kl_z >= -1e-9 and t.kl_y >= -1e-9
    loss, recon, kl = elbo_unig(VaeUniG(Msdki(), sch.T, rng=rng), x, sch, rng)
    assert np.isfinite([loss, recon, kl]).all()
    assert len(elbo_gmm(VaeGmm(Msdki(), sch.T, rng=rng), x, sch, rng)) == 4


def test_unig_perfect_fixed_point():
    sch = scheme_for_simulation(SMALL_B)
    model = Msdki()
    x = model.signal(np.array([[1.2, 0.9]]), sch)
    vae = VaeUniG(model, sch.T, beta=0.0, rng=np.random.default_rng(0))
    vae.decoder.weights[-1][:] = 0.0
    vae.decoder.biases[-1][:] = model.transform.from_physical(np.array([1.2, 0.9]))
    t, _ = vae.elbo(x, sch, vae.sample_noise(1, np.random.default_rng(1)), with_grad=False)
    assert abs(t.loss) < 1e-10


def _zero_head(net):
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = 0.0


def test_unig_kl_zero_point():
    x, sch = _small_batch(1, 10)
    vae = VaeUniG(Msdki(), sch.T, beta=1.0, rng=np.random.default_rng(0))
    _zero_head(vae.encoder)
    t, _ = vae.elbo(x, sch, vae.sample_noise(10, np.random.default_rng(2)), with_grad=False)
    assert t.kl_z == 0.0 and t.loss == t.recon


def test_gmm_kl_zero_point():
    x, sch = _small_batch(2, 10)
    vae = VaeGmm(Msdki(), sch.T, beta=1.0, prior_jitter=0.0, rng=np.random.default_rng(0))
    _zero_head(vae.encoder1)
    _zero_head(vae.encoder2)
    t, _ = vae.elbo(x, sch, vae.sample_noise(10, np.random.default_rng(2)), with_grad=False)
    assert t.kl_z == pytest.approx(0.0, abs=1e-15)
    assert t.kl_y == pytest.approx(0.0, abs=1e-15)


def test_gmm_single_component_collapse():
    x, sch = _small_batch(3, 10)
    rng = np.random.default_rng(0)
    vae = VaeGmm(Msdki(), sch.T, n_components=1, beta=0.7, rng=rng)
    vae.prior_mu[:] = [[0.4, -0.2]]
    vae.prior_log_var[:] = [[0.3, -0.1]]
    noise = vae.sample_noise(10, rng)
    t, _ = vae.elbo(x, sch, noise, with_grad=False)
    assert t.kl_y == pytest.approx(0.0, abs=1e-15)
    post = vae.posterior(x)
    np.testing.assert_allclose(post.c, 1.0)
    expected = np.mean(kl_gaussian_pair(GaussianLatent(post.mu, post.log_var),
                                        GaussianLatent(vae.prior_mu, vae.prior_log_var)))
    assert t.kl_z == pytest.approx(expected, rel=1e-12)


def test_noiseless_reconstruction(sim_scheme):
    ds = simulate(default_clusters(), 10000, sim_scheme, None, seed=0)
    _, res, _ = train_vae("unig", ds, seed=0)
    assert np.sqrt(np.mean(res.residual_rmse ** 2)) < 1e-2


def test_large_beta_collapses_posterior(sim_scheme):
    ds = simulate(default_clusters(), 1000, sim_scheme, 20.0, seed=1)
    vae, _, post = train_vae("unig", ds, config={"beta": 1e4, "epochs": 100}, seed=0)
    assert np.mean(np.abs(post.mu)) < 0.05
    assert 0.9 <= np.mean(post.sigma) <= 1.1


def test_training_deterministic_and_sampling_free(sim_scheme):
    ds = simulate(default_clusters(), 300, sim_scheme, 20.0, seed=2)
    cfg = {"epochs": 3}
    va, a, _ = train_vae("gmm", ds, config=cfg, seed=4)
    _, b, _ = train_vae("gmm", ds, config=cfg, seed=4)
    assert a.params.tobytes() == b.params.tobytes()
    np.random.default_rng(99).random(10)
    assert va.predict(ds.signals).tobytes() == a.params.tobytes()
    c = va.posterior(ds.signals).c
    np.testing.assert_allclose(c.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(c >= 0)


def test_mc_samples_and_empty(sim_scheme):
    ds = simulate(default_clusters(), 64, sim_scheme, 20.0, seed=2)
    _, res, _ = train_vae("unig", ds, config={"epochs": 2, "mc_samples": 3})
    assert res.params.shape == (64, 2)
    with pytest.raises(ValueError):
        train_vae("unig", ds.subset(np.array([], dtype=int)))
    with pytest.raises(ValueError):
        train_vae("other", ds)


def test_checkpoint_roundtrip(tmp_path, sim_scheme):
    ds = simulate(default_clusters(), 64, sim_scheme, 20.0, seed=2)
    for kind in ("unig", "gmm"):
        vae, res, _ = train_vae(kind, ds, config={"epochs": 2})
        save_vae(vae, tmp_path / f"{kind}.json")
        back = load_vae(tmp_path / f"{kind}.json")
        assert back.predict(ds.signals).tobytes() == res.params.tobytes()


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_export_latent(tmp_path):
    rng = np.random.default_rng(0)
    post = LatentPosterior(rng.normal(size=(40, 2)), rng.normal(size=(40, 2)))
    files = export_latent(post, tmp_path / "lat.csv", bins=10)
    rows = _rows(files[0])
    assert rows[0] == ["mu_0", "mu_1", "sigma_0", "sigma_1"]
    assert len(rows) == 41
    assert float(rows[5][2]) == pytest.approx(post.sigma[4, 0])
    assert sum(int(r[3]) for r in _rows(files[1])[1:]) == 80
    assert sum(int(r[4]) for r in _rows(files[2])[1:]) == 40

    gmm = LatentPosterior(post.mu, post.log_var, np.full((40, 3), 1 / 3))
    assert _rows(export_latent(gmm, tmp_path / "g.csv")[0])[0][-3:] == ["c_0", "c_1", "c_2"]

    empty = LatentPosterior(np.zeros((0, 2)), np.zeros((0, 2)))
    only = export_latent(empty, tmp_path / "e.csv")
    assert _rows(only[0]) == [["mu_0", "mu_1", "sigma_0", "sigma_1"]]
