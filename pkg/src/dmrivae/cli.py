"""Command line interface: ``simulate``, ``fit``, ``evaluate`` and ``sweep``.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import gzip
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import DEFAULT_SIM_BVALUES, parse_bval_bvec, scheme_for_simulation
from .baselines import SELFSUP_DEFAULTS, FitDivergence, FitResult, fit_lsq, fit_selfsupervised
from .evaluation import compare_maps, export_scatter, pairwise_agreement, score
from .nifti_io import (
    Volume,
    normalize_and_flatten,
    read_mask,
    read_nifti,
    write_nifti,
    write_parameter_maps,
)
from .signal_models import get_model
from .simulator import VoxelDataset, default_clusters, load_clusters, read_csv, simulate, write_csv
from .vae import VAE_DEFAULTS, export_latent, save_vae, train_vae

logger = logging.getLogger("dmrivae")

EXIT_USAGE = 2
EXIT_NUMERICAL = 3

FITTERS = ("lsq", "selfsup", "vae-unig", "vae-gmm")
LSQ_DEFAULTS = {"max_iter": 200, "tol": 1e-10, "lam0": 1e-3, "threads": 1}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _parse_snr(text: str):
    if text.lower() in ("none", "inf", "noiseless"):
        return None
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("SNR must be positive or 'none'")
    return value


def _parse_float_list(text: str) -> list[float]:
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise argparse.ArgumentTypeError("empty list")
    return [float(t) for t in items]


def _write_meta(out: Path, meta: dict) -> None:
    meta = dict(meta)
    meta.setdefault("version", __version__)
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)


def fitter_defaults(fitter: str) -> dict:
    if fitter == "lsq":
        return dict(LSQ_DEFAULTS)
    if fitter == "selfsup":
        return dict(SELFSUP_DEFAULTS)
    return dict(VAE_DEFAULTS, seed=0)


def merged_config(fitter: str, config_path, overrides: dict) -> dict:
    """Built-in defaults < config file < explicit flags."""
    cfg = fitter_defaults(fitter)
    if config_path:
        with open(config_path) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg) - {"seed", "stick_exponent"}
        if unknown:
            raise UsageError(f"unknown config keys for {fitter}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    logger.info("effective %s config: %s", fitter, json.dumps(cfg, sort_keys=True))
    return cfg


def _inflate_if_gz(path: Path, tmp: Path) -> Path:
    if path.suffix == ".gz":
        out = tmp / path.stem
        with gzip.open(path, "rb") as src, open(out, "wb") as dst:
            shutil.copyfileobj(src, dst)
        return out
    return path


def load_input(args, tmp: Path) -> VoxelDataset:
    data = Path(args.data)
    if data.is_dir():
        if args.bval or args.bvec:
            logger.warning("--bval/--bvec ignored for a dataset directory")
        return VoxelDataset.load(data)
    if not data.exists():
        raise UsageError(f"--data {data} does not exist")
    if not str(data).endswith((".nii", ".nii.gz")):
        raise UsageError("--data must be a dataset directory or a .nii/.nii.gz file")
    if not (args.bval and args.bvec):
        raise UsageError("NIfTI input requires both --bval and --bvec")
    scheme = parse_bval_bvec(Path(args.bval).read_text(), Path(args.bvec).read_text(),
                             units=args.bval_units)
    volume = read_nifti(_inflate_if_gz(data, tmp))
    mask = read_mask(_inflate_if_gz(Path(args.mask), tmp)) if args.mask else None
    ds = normalize_and_flatten(volume, scheme, mask)
    logger.info("loaded %d voxels from %s", ds.n_voxels, data)
    return ds


def run_fitter(fitter: str, dataset: VoxelDataset, model_name: str, cfg: dict, stick_exponent: str):
    opts = {"stick_exponent": stick_exponent} if model_name == "ballstick" else {}
    model = get_model(model_name, **opts)
    if fitter == "lsq":
        return fit_lsq(dataset, model, cfg), None, None
    if fitter == "selfsup":
        return fit_selfsupervised(dataset, model, cfg), None, None
    kind = "unig" if fitter == "vae-unig" else "gmm"
    vae, result, post = train_vae(kind, dataset, model, cfg, cfg.get("seed", 0))
    return result, vae, post


def write_fit_outputs(out: Path, result: FitResult, dataset: VoxelDataset, vae, post,
                      fig_format: str) -> None:
    result.save(out)
    if vae is not None:
        export_latent(post, out / "latent.csv")
        save_vae(vae, out / "model.json")
        from .plotting import latent_figure
        latent_figure(post, out / "latent", fig_format)
    if dataset.indices is not None:
        write_parameter_maps(result.params, result.param_names, dataset, out / "maps")
        write_csv(out / "indices.csv", dataset.indices, fmt="%d")
        mask = np.zeros(dataset.spatial_shape)
        mask[tuple(dataset.indices.T)] = 1.0
        zooms = tuple(dataset.meta.get("voxel_size", (1.0, 1.0, 1.0)))
        write_nifti(Volume(mask, dataset.affine, zooms), out / "mask.nii")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    clusters = default_clusters() if args.clusters == "default" else load_clusters(args.clusters)
    bvals = DEFAULT_SIM_BVALUES if args.bvals is None else args.bvals
    scheme = scheme_for_simulation(bvals)
    ds = simulate(clusters, args.n_voxels, scheme, args.snr, args.seed, args.noise, args.valid_only)
    out = Path(args.out)
    ds.meta.update({"command": "simulate", "n_voxels": args.n_voxels, "bvalues": list(map(float, bvals)),
                    "version": __version__})
    ds.save(out)
    logger.info("wrote %d voxels to %s", ds.n_voxels, out)
    return 0


def _fit_overrides(args) -> dict:
    return {"seed": args.seed, "epochs": args.epochs, "batch_size": args.batch_size,
            "threads": args.threads if args.fitter == "lsq" else None}


def cmd_fit(args) -> int:
    cfg = merged_config(args.fitter, args.config, _fit_overrides(args))
    out = Path(args.out)
    with tempfile.TemporaryDirectory() as tmp:
        ds = load_input(args, Path(tmp))
        result, vae, post = run_fitter(args.fitter, ds, args.model, cfg, args.stick_exponent)
    out.mkdir(parents=True, exist_ok=True)
    result.info.update({"data": str(args.data), "command": "fit"})
    write_fit_outputs(out, result, ds, vae, post, args.figure_format)
    logger.info("%s fit of %d voxels done in %.1f s", args.fitter, result.n_voxels, result.wall_time)
    return 0


def _load_fit_maps(fit_dir: Path, result: FitResult):
    idx = read_csv(fit_dir / "indices.csv").astype(int)
    mvol = read_nifti(fit_dir / "mask.nii")
    mask = mvol.data != 0
    maps = np.zeros(mask.shape + (result.params.shape[1],))
    maps[tuple(idx.T)] = result.params
    return maps, mask, mvol


def cmd_evaluate(args) -> int:
    if args.scatter and not args.truth:
        raise UsageError("--scatter requires --truth")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth_ds = VoxelDataset.load(args.truth) if args.truth else None
    if truth_ds is not None and truth_ds.truth is None:
        raise UsageError(f"{args.truth} has no truth.csv")
    do_scatter = truth_ds is not None and args.scatter is not False

    fits = []
    for d in args.fits:
        d = Path(d)
        if not (d / "params.csv").exists():
            raise UsageError(f"{d} is not a fit directory")
        label = d.name
        if any(label == f[0] for f in fits):
            label = f"{label}_{len(fits)}"
        fits.append((label, d, FitResult.load(d)))

    metrics = {"version": __version__, "truth": str(args.truth) if args.truth else None,
               "fits": {}, "pairwise": []}
    for label, d, res in fits:
        entry = {"fitter": res.fitter_id, "model": res.model, "path": str(d)}
        if truth_ds is not None:
            if truth_ds.n_voxels != res.n_voxels:
                raise UsageError(f"{d} has {res.n_voxels} voxels, truth has {truth_ds.n_voxels}")
            entry["scores"] = score(res.params, truth_ds.truth, truth_ds.cluster_labels, res.param_names)
        metrics["fits"][label] = entry
        if do_scatter:
            from .plotting import scatter_figure
            export_scatter(res.params, truth_ds.truth, truth_ds.cluster_labels,
                           out / f"scatter_{label}.csv", res.param_names)
            m = min(res.params.shape[1], truth_ds.truth.shape[1])
            for j in range(m):
                name = res.param_names[j]
                scatter_figure(truth_ds.truth[:, j], res.params[:, j], truth_ds.cluster_labels,
                               name, out / f"scatter_{label}_{name}", args.figure_format)

    if len(fits) >= 2:
        names = fits[0][2].param_names
        if any(f[2].param_names != names or f[2].n_voxels != fits[0][2].n_voxels for f in fits):
            raise UsageError("fits to compare must share voxels and parameters")
        metrics["pairwise"] = pairwise_agreement([(l, r.params) for l, _, r in fits], names)
        if do_scatter:
            from .plotting import comparison_grid
            column = "noiseless" if truth_ds.snr is None else f"SNR {truth_ds.snr:g}"
            for j, name in enumerate(names[:truth_ds.truth.shape[1]]):
                panels = {(l, column): (truth_ds.truth[:, j], r.params[:, j], truth_ds.cluster_labels)
                          for l, _, r in fits}
                comparison_grid(panels, name, out / f"comparison_{name}", args.figure_format)

    if fits and all((d / "mask.nii").exists() and (d / "indices.csv").exists() for _, d, _ in fits):
        loaded = [(l,) + _load_fit_maps(d, r) for l, d, r in fits]
        _, _, mask, mvol = loaded[0]
        metrics["maps"] = compare_maps([(l, m) for l, m, _, _ in loaded], fits[0][2].param_names,
                                       mask, out / "maps", mvol.affine, mvol.voxel_size)

    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    _write_meta(out, {"command": "evaluate", "fits": [str(d) for _, d, _ in fits],
                      "truth": metrics["truth"]})
    return 0


SWEEP_KEYS = {"latent-dim": "latent_dim", "kl-weight": "beta"}


def cmd_sweep(args) -> int:
    if not args.values:
        raise UsageError("--values must list at least one value")
    if args.fitter not in ("vae-unig", "vae-gmm"):
        raise UsageError("sweep runs VAE fitters only")
    key = SWEEP_KEYS[args.param]
    base = merged_config(args.fitter, args.config, _fit_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        ds = load_input(args, Path(tmp))
    rows = []
    for value in args.values:
        cfg = dict(base)
        cfg[key] = int(value) if key == "latent_dim" else float(value)
        if key == "latent_dim" and (cfg[key] < 1 or cfg[key] != value):
            raise UsageError(f"latent dimension must be a positive integer, got {value}")
        result, _, _ = run_fitter(args.fitter, ds, args.model, cfg, args.stick_exponent)
        row = {"value": value, "recon_rmse": float(np.sqrt(np.mean(result.residual_rmse ** 2))),
               "final_loss": result.info.get("final_loss")}
        if ds.truth is not None:
            table = score(result.params, ds.truth, None, result.param_names)
            for name, st in table["overall"].items():
                row[f"rmse_{name}"] = st["rmse"]
                row[f"pearson_{name}"] = st["pearson_r"]
        rows.append(row)
        logger.info("%s=%s: %s", args.param, value, row)

    cols = list(rows[0])
    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join("" if row[c] is None else repr(row[c]) for c in cols) + "\n")
    from .plotting import sweep_figure
    curves = {c: [r[c] for r in rows] for c in cols if c.startswith("rmse_")} or \
        {"recon_rmse": [r["recon_rmse"] for r in rows]}
    sweep_figure(args.values, curves, args.param, out / "sweep", args.figure_format)
    _write_meta(out, {"command": "sweep", "param": args.param, "values": args.values,
                      "fitter": args.fitter, "model": args.model, "data": str(args.data),
                      "config": base})
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _add_fit_flags(p: argparse.ArgumentParser, fitter_choices) -> None:
    p.add_argument("--fitter", choices=fitter_choices, required=fitter_choices == FITTERS,
                   default=None if fitter_choices == FITTERS else "vae-unig")
    p.add_argument("--model", choices=("msdki", "ballstick"), default="msdki")
    p.add_argument("--data", required=True, help="dataset directory or .nii/.nii.gz volume")
    p.add_argument("--bval", help="FSL bval file (NIfTI input)")
    p.add_argument("--bvec", help="FSL bvec file (NIfTI input)")
    p.add_argument("--bval-units", choices=("auto", "s/mm2", "ms/um2"), default="auto")
    p.add_argument("--mask", help="NIfTI mask; default thresholds the mean b=0 image")
    p.add_argument("--config", help="JSON file with fitter settings")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--stick-exponent", choices=("squared", "linear"), default="squared")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for voxel-parallel LSQ (default: all cores)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmrivae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--figure-format", choices=("png", "svg"), default="png")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate the three-cluster MSDKI dataset")
    p.add_argument("--n-voxels", type=int, default=10000)
    p.add_argument("--snr", type=_parse_snr, default=None, help="number or 'none'")
    p.add_argument("--clusters", default="default", help="'default' or a JSON file")
    p.add_argument("--bvals", type=_parse_float_list, default=None,
                   help="comma-separated b-values in ms/um^2 (must include 0)")
    p.add_argument("--noise", choices=("gaussian", "rician"), default="gaussian")
    p.add_argument("--valid-only", action=argparse.BooleanOptionalAction, default=True,
                   help="redraw (D, K) pairs whose signal would exceed the b=0 value")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a parameter map")
    _add_fit_flags(p, FITTERS)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score fits against ground truth and each other")
    p.add_argument("--fits", nargs="+", required=True)
    p.add_argument("--truth")
    p.add_argument("--scatter", action=argparse.BooleanOptionalAction, default=None,
                   help="write scatter CSVs and figures (default: when --truth is given)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="VAE hyperparameter sensitivity")
    p.add_argument("--param", choices=tuple(SWEEP_KEYS), required=True)
    p.add_argument("--values", type=_parse_float_list, required=True)
    _add_fit_flags(p, ("vae-unig", "vae-gmm"))
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FitDivergence, FloatingPointError) as exc:
        print(f"dmrivae {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError, OSError) as exc:
        # AcquisitionError and NiftiError are ValueErrors: bad inputs, not bugs
        print(f"dmrivae {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
