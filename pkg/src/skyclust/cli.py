"""
Batch command line: ``skyclust {mock,angcorr,kl,sys} --config run.yaml``.

Every run writes its effective configuration to ``config.yaml`` in the
output directory. Exit codes: 0 success, 1 unexpected failure, 2 invalid
configuration, 3 missing input file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import logging
import os
import sys
from typing import Any

import numpy as np
import yaml
from scipy import linalg

from . import angcorr, catalog as cat_mod, klpipe, mocks, systematics
from .cosmomodel import QuadratureError
from .pipeline import (DEFAULTS, ConfigError, VolumeSurvey, angular_mock, layout_from, merged,
                       params_from, selection_from, weights_from)

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_MISSING", "EXIT_NUMERICAL"]

logger = logging.getLogger("skyclust")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

COMMAND_DEFAULTS: dict[str, dict] = {
    "mock": {"mode": "angular", "seed": 0, "n_randoms": 100_000, "zeropoint_std": 0.015},
    "angcorr": {"catalog": None, "masks": None, "stripes": None, "cell_arcmin": 1.0,
                "theta": {"min": 2.0, "max": 75.0, "n": 20}, "half_width": 1,
                "subsamples": [{"name": "all"}], "write_maps": False, "seed": 0},
    "kl": {"regions": None, "fiducial": {},
           "grid": {"sigma8": [0.5, 0.7, 0.9, 1.1, 1.3], "gamma": [0.1, 0.2, 0.3, 0.4]},
           "n_mocks": 1, "catalogs": None, "seed": 0, "write_basis": False},
    "sys": {"zeropoint_std": 0.015, "K": 100, "ratio": 3.0, "amplification": 1.0e4,
            "n_mocks": 10, "param": "sigma8", "bounds": [0.3, 2.0], "seed": 0},
}


# ---------------------------------------------------------------------------
# config and output helpers

def load_config(path: str | None, command: str, seed: int | None) -> dict:
    cfg: dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        with open(path) as fh:
            try:
                cfg = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    base = merged({k: DEFAULTS[k] for k in ("params", "layout", "selection", "weights")},
                  COMMAND_DEFAULTS[command])
    if command in ("mock", "kl", "sys"):
        base["angular"] = DEFAULTS["angular"]
        base["volume"] = DEFAULTS["volume"]
    unknown = set(cfg) - set(base) - {"volume", "angular", "params", "layout", "selection",
                                     "weights", "mock"}
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    out = merged(base, cfg)
    if seed is not None:
        out["seed"] = int(seed)
    return out


def _write_text(path: str, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _echo_config(cfg: dict, out: str) -> None:
    _write_text(os.path.join(out, "config.yaml"), yaml.safe_dump(cfg, sort_keys=True))


def _plot_setup():
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "skyclust"
    plt.rcParams["svg.fonttype"] = "path"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


# ---------------------------------------------------------------------------
# commands

def cmd_mock(cfg: dict, out: str, threads: int) -> list[str]:
    """Clustered catalog, randoms and zero-point table."""
    params = params_from(cfg["params"])
    layout = layout_from(cfg["layout"])
    weights = weights_from(cfg["weights"])
    seed = int(cfg["seed"])
    written = []
    if cfg["mode"] == "angular":
        galaxies = angular_mock(params, layout, cfg["angular"], seed, weights=weights)
        rnd_kw = {}
    elif cfg["mode"] == "volume":
        v = cfg["volume"]
        sel = selection_from(cfg["selection"], float(v["d_min"]), float(v["d_max"]))
        geo = mocks.VolumeGeometry(layout, float(v["d_min"]), float(v["d_max"]))
        grid = geo.grid(float(v["spacing"]))
        nbar = float(v["mean_density"])
        if nbar > 0:
            field = mocks.density_field(params, grid, seed, v["method"])
            galaxies = mocks.poisson_sample(field, grid, nbar, seed, geo, selection=sel, weights=weights)
        else:
            galaxies = cat_mod.Catalog.empty()
        rnd_kw = {"dist_range": (float(v["d_min"]), float(v["d_max"]))}
    else:
        raise ConfigError(f"unknown mock mode {cfg['mode']!r}")
    path = os.path.join(out, "catalog.csv")
    cat_mod.write_catalog(galaxies, path)
    written.append(path)
    n_r = int(cfg["n_randoms"])
    randoms = (mocks.random_catalog(layout, n_r, seed, weights=weights, **rnd_kw) if n_r > 0
               else cat_mod.Catalog.empty())
    path = os.path.join(out, "randoms.csv")
    cat_mod.write_catalog(randoms, path)
    written.append(path)
    zp = mocks.draw_zeropoints(layout, float(cfg["zeropoint_std"]), seed)
    path = os.path.join(out, "zeropoints.csv")
    zp.write(path)
    written.append(path)
    return written


def _angcorr_plan(cfg: dict, layout) -> list[tuple[dict, int]]:
    stripes = cfg["stripes"] or [int(s) for s in layout.stripe_ids]
    return [(sub, int(s)) for sub in cfg["subsamples"] for s in stripes]


def cmd_angcorr(cfg: dict, out: str, threads: int) -> list[str]:
    """Per-stripe and combined w(theta) for every subsample, plus a log-log plot."""
    if not cfg["catalog"]:
        raise ConfigError("angcorr needs 'catalog'")
    layout = layout_from(cfg["layout"])
    catalog = cat_mod.load_catalog(cfg["catalog"])
    masks = cat_mod.load_masks(cfg["masks"]) if cfg["masks"] else cat_mod.MaskSet()
    th = cfg["theta"]
    edges = angcorr.log_bins(float(th["min"]), float(th["max"]), int(th["n"]))
    plan = _angcorr_plan(cfg, layout)
    subs = {}
    for sub in cfg["subsamples"]:
        spec = cat_mod.SubsampleSpec(**{k: (tuple(v) if k == "stripes" else v) for k, v in sub.items()})
        subs[spec.name or "all"] = cat_mod.apply_subsample(catalog, spec)

    def run(item):
        sub, stripe = item
        name = sub.get("name") or "all"
        return angcorr.stripe_correlation(subs[name], masks, stripe, layout, edges,
                                          cell=float(cfg["cell_arcmin"]),
                                          half_width=cfg["half_width"], return_map=True)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, plan))
    written = []
    per_sub: dict[str, list] = {}
    for (sub, stripe), (wt, cmap) in zip(plan, results):
        name = sub.get("name") or "all"
        per_sub.setdefault(name, []).append(wt)
        path = os.path.join(out, f"wtheta_{name}_stripe{stripe}.txt")
        angcorr.write_wtheta(wt, path)
        written.append(path)
        if cfg["write_maps"]:
            path = os.path.join(out, f"wmap_{name}_stripe{stripe}.txt")
            angcorr.write_map(cmap, path)
            written.append(path)
    plt = _plot_setup()
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, items in per_sub.items():
        comb = angcorr.combine_stripes(items) if len(items) > 1 else items[0]
        path = os.path.join(out, f"wtheta_{name}_combined.txt")
        angcorr.write_wtheta(comb, path)
        written.append(path)
        pos = comb.w > 0
        ax.errorbar(comb.theta[pos], comb.w[pos], yerr=comb.err[pos], fmt="o-", ms=3, label=name)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("theta [arcmin]")
    ax.set_ylabel("w(theta)")
    ax.legend()
    path = os.path.join(out, "wtheta.svg")
    _save_svg(fig, path)
    plt.close(fig)
    written.append(path)
    return written


def _kl_regions(cfg: dict) -> list[dict]:
    regions = cfg.get("regions") or [{}]
    out = []
    for k, r in enumerate(regions):
        item = {
            "layout": merged(cfg["layout"], r.get("layout")),
            "volume": merged(cfg["volume"], r.get("volume")),
            "weights": r.get("weights", cfg["weights"]),
            "selection": r.get("selection", cfg["selection"]),
            "catalog": r.get("catalog"),
        }
        out.append(item)
    return out


def _survey(region: dict) -> VolumeSurvey:
    layout = layout_from(region["layout"])
    v = region["volume"]
    sel = selection_from(region["selection"], float(v["d_min"]), float(v["d_max"]))
    return VolumeSurvey.build(layout, sel, weights_from(region["weights"]), v)


def _region_data(survey: VolumeSurvey, region: dict, params, seed: int):
    if region["catalog"]:
        catalog = cat_mod.load_catalog(region["catalog"])
    else:
        catalog = survey.mock(params, seed)
    return survey.data_vector(catalog)


def cmd_kl(cfg: dict, out: str, threads: int) -> list[str]:
    """Likelihood surface per region and their sum, with Fisher summary."""
    truth = params_from(cfg["params"])
    fid = params_from(merged(cfg["params"], cfg["fiducial"]))
    axes = {k: [float(v) for v in vals] for k, vals in cfg["grid"].items()}
    regions = _kl_regions(cfg)
    written = []
    surfaces = []
    for k, region in enumerate(regions):
        survey = _survey(region)
        xv = _region_data(survey, region, truth, _region_seed(int(cfg["seed"]), k))
        model = survey.model(xv)
        basis = klpipe.kl_decompose(model.covariance(fid), keep=survey.cfg["keep"])
        y = klpipe.kl_project(xv, basis)
        surf = klpipe.likelihood_grid(y, axes, basis, model, base=fid, workers=threads)
        surfaces.append(surf)
        path = os.path.join(out, f"surface_region{k}.txt")
        _write_text(path, surf.to_text() + surf.summary())
        written.append(path)
        if cfg["write_basis"]:
            path = os.path.join(out, f"basis_region{k}.npy")
            klpipe.save_array(path, basis.B)
            written.append(path)
    total = klpipe.combine_surfaces(surfaces) if len(surfaces) > 1 else surfaces[0]
    path = os.path.join(out, "surface_total.txt")
    _write_text(path, total.to_text())
    written.append(path)
    path = os.path.join(out, "summary.txt")
    _write_text(path, total.summary())
    written.append(path)
    if len(total.names) == 2 and all(a.size > 1 for a in total.axes):
        plt = _plot_setup()
        fig, ax = plt.subplots(figsize=(5, 4))
        a0, a1 = total.axes
        cs = ax.contourf(a0, a1, (total.lnL - total.peak_lnL).T, levels=20)
        fig.colorbar(cs, ax=ax, label="ln L - max")
        ax.plot([total.peak[total.names[0]]], [total.peak[total.names[1]]], "w+")
        ax.set_xlabel(total.names[0])
        ax.set_ylabel(total.names[1])
        path = os.path.join(out, "surface.svg")
        _save_svg(fig, path)
        plt.close(fig)
        written.append(path)
    return written


def _region_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7919, int(k)]).generate_state(1)[0])


def cmd_sys(cfg: dict, out: str, threads: int) -> list[str]:
    """Three-arm zero-point injection test on volume mocks."""
    params = params_from(cfg["params"])
    region = _kl_regions(cfg)[0]
    survey = _survey(region)
    seed = int(cfg["seed"])
    xvecs = [survey.data_vector(survey.mock(params, _region_seed(seed, 100 + i)))
             for i in range(int(cfg["n_mocks"]))]
    # common surviving-cell set: cells surviving in every mock (geometry only, so identical)
    model = survey.model(xvecs[0])
    profile = systematics.ModulationProfile(survey.selection)
    mod = systematics.modulation_matrix(survey.base_counts, xvecs[0], survey.randoms, profile,
                                        survey.layout)
    csys = systematics.ensemble_sys_covariance(mod, survey.layout, float(cfg["zeropoint_std"]),
                                               int(cfg["K"]), seed)
    report = systematics.inject_and_test(xvecs, model, params, mod, survey.layout, csys,
                                         float(cfg["zeropoint_std"]), seed,
                                         keep=survey.cfg["keep"], ratio=float(cfg["ratio"]),
                                         amplification=float(cfg["amplification"]),
                                         param=cfg["param"], bounds=tuple(cfg["bounds"]))
    written = []
    path = os.path.join(out, "bias_report.txt")
    text = report.to_text() + f"# median_bias_reduction {report.median_reduction()!r}\n"
    _write_text(path, text)
    written.append(path)
    path = os.path.join(out, "csys.npy")
    klpipe.save_array(path, csys.C)
    written.append(path)
    return written


COMMANDS = {"mock": cmd_mock, "angcorr": cmd_angcorr, "kl": cmd_kl, "sys": cmd_sys}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skyclust", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker/BLAS thread cap")
        p.add_argument("--dry-run", action="store_true", help="print the resolved plan only")
    return parser


def _plan_text(command: str, cfg: dict, out: str) -> str:
    lines = [f"command: {command}", f"output directory: {out}", "effective config:",
             yaml.safe_dump(cfg, sort_keys=True).rstrip()]
    if command == "angcorr":
        try:
            layout = layout_from(cfg["layout"])
            plan = _angcorr_plan(cfg, layout)
            lines.append(f"jobs: {len(plan)} (subsample x stripe)")
        except ConfigError:
            pass
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command, args.seed)
        if args.dry_run:
            sys.stdout.write(_plan_text(args.command, cfg, args.out))
            return EXIT_OK
        os.makedirs(args.out, exist_ok=True)
        from threadpoolctl import threadpool_limits
        # BLAS stays single-threaded so results do not depend on --threads;
        # the flag sizes the task-level worker pools instead
        with threadpool_limits(limits=1):
            written = COMMANDS[args.command](cfg, args.out, max(1, args.threads))
        _echo_config(cfg, args.out)
        for path in written:
            if not os.path.exists(path):
                raise RuntimeError(f"artifact not written: {path}")
        return EXIT_OK
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, cat_mod.CatalogFormatError, KeyError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (linalg.LinAlgError, QuadratureError, angcorr.EmptyWindowError, mocks.GridResolutionError,
            ValueError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
