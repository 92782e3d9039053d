"""Command-line front end: ``pccmjo <command> [--config FILE] [--set key=value] [--seed N]``.

Every command works inside one work directory::

    data/      gen-synthetic       raw dataset (index.csv, *.mjog, dataset.json)
    prep/      preprocess          zscore.mjoz, climatology.mjoc, anomalies/, prep.json
    model/     fit-eof, train      eof.mjoe, model.mjow, training_log.csv
    correct/   correct             corrected_*.mjog, rmm_{observed,raw,corrected}.csv
    verify/    verify ... ablate   CSV tables and SVG figures

Each output directory receives ``resolved_config.json``. Exit codes: 2 configuration error,
3 data error, 4 model error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C, eofrmm, gridio, pcc, prep, svg, verify, xai
from .container import FormatError, atomic_write_text

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_MODEL = 0, 2, 3, 4

log = logging.getLogger("pccmjo")


class MissingInputError(FileNotFoundError):
    pass


# ---------------------------------------------------------------- workdir helpers

class Workdir:
    def __init__(self, cfg: C.RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.resolved_workdir())

    def out(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        atomic_write_text(d / "resolved_config.json", C.dumps(self.cfg))
        return d

    def need(self, rel: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingInputError(f"missing input {p}; run the upstream command first")
        return p

    def anomaly_dir(self) -> Path:
        meta = json.loads(self.need("prep/prep.json").read_text())
        return self.root / meta["anomaly_dir"]

    def dataset(self) -> gridio.Dataset:
        return gridio.load_dataset(self.anomaly_dir())

    def split(self):
        return gridio.chronological_split(self.dataset())

    def model(self) -> pcc.CorrectorModel:
        path = self.need("model/model.mjow")
        try:
            return pcc.load_model(path)
        except FormatError as exc:
            raise pcc.ModelError(f"cannot load checkpoint {path}: {exc}") from exc

    def rmm(self, which: str, override=None):
        path = Path(override) if override else self.need(f"correct/rmm_{which}.csv")
        if not path.exists():
            raise MissingInputError(f"missing input {path}")
        return eofrmm.read_rmm_csv(path.read_text())


def _series_csv(dates, rmm) -> str:
    return eofrmm.rmm_csv([eofrmm.RmmSeries(r, int(d)) for d, r in zip(dates, rmm)])


def _matrix_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(v) -> str:
    return "nan" if not np.isfinite(v) else f"{float(v):.10g}"


def _band(cfg: C.RunConfig):
    return (cfg.prep.band_south, cfg.prep.band_north)


# ---------------------------------------------------------------- commands

def cmd_gen_synthetic(wd: Workdir, args) -> None:
    data = gridio.generate_synthetic(wd.cfg.synthetic)
    out = wd.out("data")
    gridio.save_dataset(data, out)
    log.info("wrote %d cases to %s", len(data.cases), out)


def cmd_preprocess(wd: Workdir, args) -> None:
    data = gridio.load_dataset(wd.need("data/index.csv").parent)
    train_cases, _ = gridio.chronological_split(data)
    out = wd.out("prep")
    p = wd.cfg.prep
    meta = {"anomaly_dir": "data", "climatology": None,
            "remove_climatology": p.remove_climatology, "remove_lowfreq": p.remove_lowfreq}
    if p.remove_climatology or p.remove_lowfreq:
        data, clim = prep.preprocess_dataset(data, len(train_cases), p.remove_climatology,
                                             prep.RUNNING_MEAN_DAYS if p.remove_lowfreq else None)
        gridio.save_dataset(data, out / "anomalies")
        meta["anomaly_dir"] = "prep/anomalies"
        if clim is not None:
            prep.save_climatology(clim, out / "climatology.mjoc")
            meta["climatology"] = "prep/climatology.mjoc"
        train_cases, _ = gridio.chronological_split(data)
    zs = prep.zscore_fit(pcc.stack_cases(train_cases, "truth"), var_axis=1)
    prep.save_zscore(zs, out / "zscore.mjoz")
    atomic_write_text(out / "prep.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cmd_fit_eof(wd: Workdir, args) -> None:
    data = wd.dataset()
    train_cases, _ = gridio.chronological_split(data)
    grid = data.grid
    prof = eofrmm.profiles_from_fields(pcc.stack_cases(train_cases, "truth"), grid, _band(wd.cfg))
    basis = eofrmm.fit_eof(prof.reshape(-1, 3, grid.n_lon), grid, _band(wd.cfg))
    out = wd.out("model")
    eofrmm.save_basis(basis, out / "eof.mjoe")
    log.info("explained variance %s", basis.explained_variance)


def cmd_train(wd: Workdir, args) -> None:
    data = wd.dataset()
    zs = prep.load_zscore(wd.need("prep/zscore.mjoz"))
    basis = eofrmm.load_basis(wd.need("model/eof.mjoe"))
    model = pcc.train(data, wd.cfg.train, wd.cfg.unet, zscore=zs, basis=basis)
    clim = json.loads(wd.need("prep/prep.json").read_text()).get("climatology")
    model.climatology_ref = clim or ""
    out = wd.out("model")
    pcc.save_model(model, out / "model.mjow")
    atomic_write_text(out / "training_log.csv", pcc.training_log_csv(model))


def cmd_correct(wd: Workdir, args) -> None:
    model = wd.model()
    _, test = wd.split()
    F = pcc.stack_cases(test, "forecast")
    Y = pcc.stack_cases(test, "truth")
    fields, rmm = pcc.correct_batch(model, F, wd.cfg.train.micro_batch)
    out = wd.out("correct")
    dates = [c.init_date for c in test]
    for i, c in enumerate(test):
        fld = gridio.AnomalyField(fields[i].astype(np.float32), c.init_date, c.forecast.grid)
        gridio.write_grid_file(fld, out / f"corrected_{i:05d}.mjog")
    atomic_write_text(out / "rmm_observed.csv", _series_csv(dates, pcc.observed_rmm(Y, model)))
    atomic_write_text(out / "rmm_raw.csv", _series_csv(dates, pcc.raw_rmm(model, F)))
    atomic_write_text(out / "rmm_corrected.csv", _series_csv(dates, rmm))


def _triple(wd: Workdir, args):
    d_obs, obs = wd.rmm("observed", getattr(args, "observed", None))
    d_raw, raw = wd.rmm("raw", getattr(args, "raw", None))
    d_cor, cor = wd.rmm("corrected", getattr(args, "corrected", None))
    if not (np.array_equal(d_obs, d_raw) and np.array_equal(d_obs, d_cor)):
        raise ValueError("observed, raw and corrected RMM files cover different cases")
    if not obs.shape == raw.shape == cor.shape:
        raise ValueError("observed, raw and corrected RMM files differ in shape")
    return d_obs, obs, raw, cor


def cmd_verify(wd: Workdir, args) -> None:
    _, obs, raw, cor = _triple(wd, args)
    rep = verify.skill_report(obs, raw, cor)
    out = wd.out("verify")
    text = verify.skill_csv(rep)
    atomic_write_text(out / "skill.csv", text)
    _write_skill_svg(out, text)
    summary = {"n": rep.n, "skillful_lead_raw": rep.skillful_lead_raw,
               "skillful_lead_corrected": rep.skillful_lead_corr}
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"skillful lead raw {rep.skillful_lead_raw} corrected {rep.skillful_lead_corr}")


def _write_skill_svg(out: Path, skill_text: str) -> None:
    t = verify.read_skill_csv(skill_text)
    atomic_write_text(out / "skill.svg", svg.skill_curves(t["lead"], t["cor_raw"], t["cor_corr"],
                                                          t["sig"]))


def cmd_composite(wd: Workdir, args) -> None:
    _, obs, raw, cor = _triple(wd, args)
    comps = verify.phase_composites(obs, raw, cor, wd.cfg.verify.min_amplitude)
    out = wd.out("verify")
    text = verify.composite_csv(comps)
    atomic_write_text(out / "composite.csv", text)
    atomic_write_text(out / "phase_diagram.svg", svg.phase_wheel(_trajectories(text)))
    lead = wd.cfg.verify.composite_lead
    groups = [c for c in comps if c.count]
    r, k = verify.composite_lags(comps, lead)
    rows = [[c.phase, c.count, lead, _f(a), _f(b)] for c, a, b in zip(groups, r, k)]
    atomic_write_text(out / "lags.csv", _matrix_csv(["phase", "count", "lead", "lag_raw",
                                                     "lag_corrected"], rows))


def _trajectories(composite_text: str) -> dict:
    traj = {}
    for r in csv.DictReader(io.StringIO(composite_text)):
        if r["source"] == "missing":
            continue
        traj.setdefault(f"{r['source']} phase {r['phase']}", []).append(
            (float(r["rmm1"]), float(r["rmm2"])))
    return {k: np.array(v) for k, v in traj.items()}


def cmd_hovmoller(wd: Workdir, args) -> None:
    _, test = wd.split()
    i = wd.cfg.verify.hovmoller_case
    if not 0 <= i < len(test):
        raise C.ConfigError(f"verify.hovmoller_case {i} outside 0..{len(test) - 1}")
    corrected = gridio.read_grid_file(wd.need(f"correct/corrected_{i:05d}.mjog"))
    band = _band(wd.cfg)
    grid = test[i].forecast.grid
    mats = {"observed": verify.hovmoller(test[i].truth.values, grid, band),
            "raw": verify.hovmoller(test[i].forecast.values, grid, band),
            "corrected": verify.hovmoller(corrected.values, grid, band)}
    out = wd.out("verify")
    parts = []
    for name in ("observed", "raw", "corrected"):
        text = verify.hovmoller_csv(mats[name])
        lines = text.splitlines()
        if not parts:
            parts.append("source," + lines[0])
        parts.extend(f"{name},{ln}" for ln in lines[1:])
        atomic_write_text(out / f"hovmoller_{name}.svg",
                          svg.hovmoller(mats[name][0], f"OLR anomaly, {name}"))
    atomic_write_text(out / "hovmoller.csv", "\n".join(parts) + "\n")
    rows = [[gridio.VARIABLES[v], _f(verify.pattern_cc(mats["observed"][v], mats[s][v])), s]
            for s in ("raw", "corrected") for v in range(3)]
    atomic_write_text(out / "pcc.csv", _matrix_csv(["var", "pcc", "source"], rows))


def cmd_stratify(wd: Workdir, args) -> None:
    dates, obs, raw, cor = _triple(wd, args)
    months = gridio.month_of_day(dates)
    tabs = verify.stratified_skill(obs, raw, cor, months, wd.cfg.verify.min_stratum_count)
    out = wd.out("verify")
    atomic_write_text(out / "stratified.csv", verify.stratified_csv(tabs))
    for tab in tabs:
        atomic_write_text(out / f"stratified_{tab.kind}.svg",
                          svg.heatmap(tab.diff, f"COR gain by initial {tab.kind}", "lead (days)",
                                      tab.kind))


def cmd_attribute(wd: Workdir, args) -> None:
    model = wd.model()
    _, test = wd.split()
    a = wd.cfg.attribute
    lead = args.lead if getattr(args, "lead", None) is not None else a.target_lead
    n = min(a.n_samples, len(test))
    out = wd.out("verify")
    rows = []
    for target in xai.TARGETS:
        maps = [xai.attribute(model, c.forecast.values, target, lead, a.steps, a.chunk)
                for c in test[:n]]
        comp = xai.composite_attributions(maps)
        xai.save_attribution(comp, out / f"attribution_{target}.mjoa")
        profile = xai.meridional_attribution(comp, model.grid, model.basis.band)
        atomic_write_text(out / f"attribution_profile_{target}.csv", xai.profile_csv(profile))
        resid = max(m.completeness_residual / max(abs(m.delta_f), 1e-300) for m in maps)
        rows.append([target, lead, n, a.steps, _f(xai.eof_congruence(profile, model.basis, target)),
                     _f(resid)])
    atomic_write_text(out / "congruence.csv", _matrix_csv(
        ["target", "lead", "n_samples", "steps", "congruence", "max_rel_completeness_residual"],
        rows))


def variant_configs(name: str, unet: pcc.UNetConfig, train: pcc.TrainConfig):
    """Kernel-schedule and stage ablations relative to the configured model."""
    if name == "default":
        return unet, train
    if name == "uniform_spatial":
        return replace(unet, spatial_kernels=((3, 3),) * len(unet.spatial_kernels)), train
    if name == "reversed_temporal":
        return replace(unet, temporal_kernels=tuple(reversed(unet.temporal_kernels))), train
    if name == "no_temporal":
        return replace(unet, temporal_kernels=(1,) * len(unet.temporal_kernels)), train
    if name == "no_stage1":
        return unet, replace(train, stage="stage2")
    if name == "no_stage2":
        return unet, replace(train, stage="stage1")
    raise C.ConfigError(f"unknown ablation variant {name!r}")


def cmd_ablate(wd: Workdir, args) -> None:
    data = wd.dataset()
    _, test = gridio.chronological_split(data)
    zs = prep.load_zscore(wd.need("prep/zscore.mjoz"))
    basis = eofrmm.load_basis(wd.need("model/eof.mjoe"))
    F = pcc.stack_cases(test, "forecast")
    Y = pcc.stack_cases(test, "truth")
    configs = [(v, *variant_configs(v, wd.cfg.unet, wd.cfg.train)) for v in wd.cfg.ablate.variants]
    rows, summary, curves = [], [], []
    for name, ucfg, tcfg in configs:
        log.info("ablation variant %s", name)
        model = pcc.train(data, tcfg, ucfg, zscore=zs, basis=basis)
        _, rmm = pcc.correct_batch(model, F, tcfg.micro_batch)
        obs = pcc.observed_rmm(Y, model)
        curve = verify.cor_curve(obs, rmm)
        curves.append(curve)
        rows.extend([name, t + 1, _f(c)] for t, c in enumerate(curve))
        summary.append([name, verify.skillful_lead(curve), _f(float(np.mean(curve))),
                        pcc.count_parameters(model)[0]])
    out = wd.out("verify")
    atomic_write_text(out / "ablation.csv", _matrix_csv(["variant", "lead", "cor"], rows))
    atomic_write_text(out / "ablation_summary.csv", _matrix_csv(
        ["variant", "skillful_lead", "mean_cor", "unet_params"], summary))
    atomic_write_text(out / "ablation.svg", svg.heatmap(np.array(curves), "COR by variant and lead",
                                                        "lead (days)", "variant", vmax=1.0))


COMMANDS = {
    "gen-synthetic": (cmd_gen_synthetic, "generate the synthetic dataset"),
    "preprocess": (cmd_preprocess, "anomalies and normalization statistics"),
    "fit-eof": (cmd_fit_eof, "fit the combined EOF basis on training truth"),
    "train": (cmd_train, "train the cascaded corrector"),
    "correct": (cmd_correct, "correct the test forecasts and export RMM series"),
    "verify": (cmd_verify, "skill table and skill-curve figure"),
    "composite": (cmd_composite, "phase-composite trajectories"),
    "hovmoller": (cmd_hovmoller, "Hovmöller diagrams and pattern correlations"),
    "stratify": (cmd_stratify, "skill stratified by initial phase and month"),
    "attribute": (cmd_attribute, "integrated-gradients attribution and EOF congruence"),
    "ablate": (cmd_ablate, "kernel-schedule and stage ablation sweep"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pccmjo", description="Cascaded MJO forecast corrector")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (value parsed as JSON when possible)")
        p.add_argument("--seed", type=int, help="seed for every random component")
        p.add_argument("--workdir", help="work directory (default: config, then $%s)"
                       % C.OUTPUT_ROOT_ENV)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("verify", "composite", "stratify"):
            for which in ("observed", "raw", "corrected"):
                p.add_argument(f"--{which}", help=f"RMM CSV overriding correct/rmm_{which}.csv")
        if name == "attribute":
            p.add_argument("--lead", type=int, help="target lead (overrides attribute.target_lead)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        overrides = list(args.set)
        if args.workdir:
            overrides.append(f"workdir={json.dumps(args.workdir)}")
        cfg = C.load(args.config, overrides, args.seed)
        COMMANDS[args.command][0](Workdir(cfg), args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, gridio.NonFiniteError, gridio.SplitError, MissingInputError,
            prep.DegenerateVariableError, eofrmm.DegenerateCovarianceError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except pcc.ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
