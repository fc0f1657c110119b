"""Experiment runner: dataset, training, analyses and reports in one output directory.

Stages run in a fixed order.  A failing stage is recorded in ``manifest.json``
with its error and every later stage is marked skipped; files written by
earlier stages are kept.
"""
from __future__ import annotations

import csv
import json
import math
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, robustness_curve, write_robustness_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, SweepConfig
from .data import Dataset, gen_dataset, write_dataset
from .lipschitz import (
    LipschitzReportRow,
    certify_decoder_variance,
    empirical_lipschitz,
    lipschitz_upper_bound,
    write_lipschitz_report,
)
from .measure import EstimatorConfig
from .spectral import encoder_mean_spectrum, optimal_poly_degree, reconstruction_spectrum
from .vae import VaeModel, decoder_hermite_variance, degree_profile, encode, reconstruct, train

STAGES = ("dataset", "train", "spectrum", "hermite", "lipschitz", "attack", "summary")


def fmt(v) -> str:
    """CSV number format: 12 significant digits, stable across runs."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


class StageFailed(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class RunContext:
    cfg: ExperimentConfig
    out: Path
    dataset: Dataset | None = None
    model: VaeModel | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features(self.cfg.dataset.include_coordinate)

    @property
    def data_columns(self) -> list[int]:
        """Model outputs that reconstruct y (the t column, if present, is excluded)."""
        offset = 1 if self.cfg.dataset.include_coordinate else 0
        return list(range(offset, offset + self.dataset.y.shape[1]))

    def path(self, name: str) -> Path:
        return self.out / name


def _stage_dataset(ctx: RunContext) -> list[str]:
    spec = ctx.cfg.dataset
    ctx.dataset = gen_dataset(spec.kind, spec.size, spec.seed, spec.normalized_sinc)
    write_dataset(ctx.dataset, ctx.path("dataset.csv"))
    return ["dataset.csv"]


def _stage_train(ctx: RunContext) -> list[str]:
    cfg = ctx.cfg
    x = ctx.features
    model = VaeModel.create(
        x.shape[1], cfg.model.latent_dim, hidden=cfg.model.hidden, activation=cfg.model.activation,
        fixed_sigma_phi=cfg.train.fixed_sigma_phi, likelihood_scale=cfg.model.likelihood_scale,
        seed=cfg.train.seed,
    )
    result = train(model, x, cfg.train)
    ctx.model = model
    save_checkpoint(model, ctx.path("checkpoint.json"),
                    {"config_hash": cfg.config_hash(), "training_hash": cfg.training_hash(), "name": cfg.name})
    write_rows(ctx.path("train_log.csv"), ["epoch", "elbo", "reconstruction_term", "kl_term"],
               [(i, r.elbo, r.reconstruction_term, r.kl_term) for i, r in enumerate(result.log)])
    if result.log:
        last = result.log[-1]
        ctx.metrics.update(final_elbo=last.elbo, final_reconstruction_term=last.reconstruction_term,
                           final_kl_term=last.kl_term)
    rec = reconstruct(model, x)
    ctx.metrics["reconstruction_mse"] = float(np.mean((rec[:, ctx.data_columns] - ctx.dataset.y) ** 2))
    return ["checkpoint.json", "train_log.csv"]


def _stage_spectrum(ctx: RunContext) -> list[str]:
    a = ctx.cfg.analysis
    if not a.spectra:
        return []
    x, t, cols = ctx.features, ctx.dataset.t, ctx.data_columns
    rec = reconstruction_spectrum(ctx.model, x, t, a.detrend)
    enc = encoder_mean_spectrum(ctx.model, x, t, a.detrend)
    rec.to_csv(ctx.path("reconstruction_spectrum.csv"))
    enc.to_csv(ctx.path("encoder_spectrum.csv"))
    ctx.metrics["reconstruction_hff"] = rec.high_frequency_fraction(a.cutoff, dims=cols)
    ctx.metrics["encoder_hff"] = enc.high_frequency_fraction(a.cutoff)
    if a.cutoff is not None:
        # the default (quarter-Nyquist) statistic is kept for comparison
        ctx.metrics["reconstruction_hff_default_cutoff"] = rec.high_frequency_fraction(None, dims=cols)
        ctx.metrics["encoder_hff_default_cutoff"] = enc.high_frequency_fraction(None)

    outputs = ["reconstruction_spectrum.csv", "encoder_spectrum.csv"]
    recon = reconstruct(ctx.model, x)
    k_stars, top_errors = [], []
    rows = []
    for j, col in enumerate(cols):
        res = optimal_poly_degree(t, recon[:, col], a.k_max, a.cv_splits, a.cv_seed)
        k_stars.append(res.k_star)
        top_errors.append(res.cv_error_per_degree[a.k_max])
        rows += [(j, k, e) for k, e in res.cv_error_per_degree.items()]
    write_rows(ctx.path("degree_selection.csv"), ["output", "degree", "mean_cv_mse"], rows)
    write_rows(ctx.path("k_star.csv"), ["output", "k_star"], list(enumerate(k_stars)))
    ctx.metrics["k_star"] = float(np.median(k_stars))
    ctx.metrics["cv_mse_at_k_max"] = float(np.median(top_errors))
    return outputs + ["degree_selection.csv", "k_star.csv"]


def _stage_hermite(ctx: RunContext) -> list[str]:
    a = ctx.cfg.analysis
    if a.hermite_degree <= 0:
        return []
    x = ctx.features
    idx = ctx.dataset.subset(min(a.hermite_points, len(ctx.dataset)), a.variance_seed)
    rows, high = [], []
    for i in idx:
        decomps = decoder_hermite_variance(ctx.model, x[i], a.hermite_degree, EstimatorConfig(seed=a.variance_seed))
        prof = degree_profile(decomps)
        total = sum(prof.values())
        high.append(sum(v for k, v in prof.items() if k >= 2) / total if total > 0 else 0.0)
        rows += [(int(i), k, v) for k, v in sorted(prof.items())]
    write_rows(ctx.path("hermite_profile.csv"), ["point", "degree", "variance"], rows)
    ctx.metrics["hermite_high_degree_fraction"] = float(np.mean(high))
    return ["hermite_profile.csv"]


def _stage_lipschitz(ctx: RunContext) -> list[str]:
    a = ctx.cfg.analysis
    if not a.lipschitz:
        return []
    model, x = ctx.model, ctx.features
    rng = np.random.default_rng(a.lipschitz_seed)
    n = min(a.lipschitz_samples, len(ctx.dataset))
    rows_idx = np.sort(rng.choice(len(ctx.dataset), size=n, replace=False))
    mu, sigma = encode(model, x[rows_idx])
    latent_pts = mu + sigma * rng.standard_normal(mu.shape)

    dec_ub = lipschitz_upper_bound(model.decoder)
    enc_ub = lipschitz_upper_bound(model.encoder_mean)
    dec_emp = empirical_lipschitz(model.decoder, latent_pts)
    enc_emp = empirical_lipschitz(model.encoder_mean, x[rows_idx])
    ctx.metrics.update(decoder_upper_bound=dec_ub, decoder_empirical=dec_emp,
                       encoder_upper_bound=enc_ub, encoder_empirical=enc_emp)

    sp = ctx.cfg.train.fixed_sigma_phi
    sp_val = float(np.max(sp)) if sp is not None else float("nan")
    noise = ctx.cfg.train.input_noise_sigma
    var_max = slack = float("nan")
    outputs = []
    if a.variance_samples > 0:
        cert = certify_decoder_variance(model, x, a.variance_samples, a.variance_seed, lipschitz=dec_ub)
        var_max, slack = cert.var_max, cert.slack_min
        ctx.metrics.update(variance_max=var_max, poincare_slack_min=slack,
                           poincare_violations=cert.violations, poincare_checks=cert.variances.size)
        write_rows(ctx.path("variance_certificate.csv"),
                   ["point", "output", "variance", "std_error", "bound"],
                   [(i, j, cert.variances[i, j], cert.std_errors[i, j], cert.bounds[i, j])
                    for i in range(cert.variances.shape[0]) for j in range(cert.variances.shape[1])])
        outputs.append("variance_certificate.csv")
    write_lipschitz_report([
        LipschitzReportRow("decoder", sp_val, dec_ub, dec_emp, var_max, slack),
        LipschitzReportRow("encoder_mean", noise, enc_ub, enc_emp),
    ], ctx.path("lipschitz.csv"))
    return ["lipschitz.csv", *outputs]


def _stage_attack(ctx: RunContext) -> list[str]:
    spec = ctx.cfg.analysis.attack
    if spec is None:
        return []
    x = ctx.features
    idx = ctx.dataset.subset(min(spec.n_points, len(ctx.dataset)), spec.seed)
    cfg = AttackConfig(max(spec.C_grid), spec.steps, spec.step_size, spec.restarts, spec.seed)
    curve = robustness_curve(ctx.model, x[idx], spec.C_grid, cfg)
    sp = ctx.cfg.train.fixed_sigma_phi
    write_robustness_csv(curve, ctx.path("robustness.csv"), None if sp is None else float(np.max(sp)),
                         ctx.cfg.train.input_noise_sigma)
    for p in curve:
        ctx.metrics[f"degradation_C{p.C:g}"] = p.mean_degradation
    return ["robustness.csv"]


def _stage_summary(ctx: RunContext) -> list[str]:
    write_rows(ctx.path("summary.csv"), ["metric", "value"], sorted(ctx.metrics.items()))
    return ["summary.csv"]


_RUNNERS = {
    "dataset": _stage_dataset,
    "train": _stage_train,
    "spectrum": _stage_spectrum,
    "hermite": _stage_hermite,
    "lipschitz": _stage_lipschitz,
    "attack": _stage_attack,
    "summary": _stage_summary,
}


@dataclass
class RunResult:
    out: Path
    manifest: dict
    metrics: dict
    model: VaeModel | None = None

    @property
    def ok(self) -> bool:
        return all(s["status"] in ("ok", "not_requested") for s in self.manifest["stages"])


def run_experiment(cfg: ExperimentConfig, out=None, stages=STAGES, reuse_model: Path | None = None,
                   raise_on_failure: bool = False) -> RunResult:
    """Run ``stages`` in order and write everything under ``out`` (default cfg.output_dir).

    With ``reuse_model`` the train stage loads that checkpoint instead of
    training.  Its dataset, model and train sections must match ``cfg``; the
    analysis settings may differ.
    """
    out = Path(cfg.output_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg, out)
    previous = _previous_records(out, cfg, ctx)
    records = []
    failure = None
    for stage in STAGES:
        if stage not in stages:
            continue
        if failure is not None:
            records.append({"stage": stage, "status": "skipped", "outputs": []})
            continue
        try:
            if stage == "train" and reuse_model is not None:
                outputs = _reuse(ctx, Path(reuse_model))
            else:
                outputs = _RUNNERS[stage](ctx)
            status = "ok" if outputs or stage in ("dataset", "train", "summary") else "not_requested"
            records.append({"stage": stage, "status": status, "outputs": outputs})
        except Exception as exc:  # any stage failure is reported, not raised
            failure = StageFailed(stage, f"{type(exc).__name__}: {exc}")
            failure.__cause__ = exc
            records.append({"stage": stage, "status": "failed", "outputs": [],
                            "error": f"{type(exc).__name__}: {exc}",
                            "traceback": traceback.format_exc(limit=4)})
    ran = {r["stage"] for r in records}
    records = sorted([r for r in previous if r["stage"] not in ran] + records,
                     key=lambda r: STAGES.index(r["stage"]))
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "stages": records,
        "outputs": [o for r in records for o in r["outputs"]],
    }
    with open(out / "config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if failure is not None and raise_on_failure:
        raise failure
    return RunResult(out, manifest, dict(ctx.metrics), ctx.model)


def _previous_records(out: Path, cfg: ExperimentConfig, ctx: RunContext) -> list[dict]:
    """Stage records and metrics of an earlier run of the same config in ``out``."""
    if not (out / "manifest.json").exists():
        return []
    manifest, metrics = load_run(out)
    if manifest.get("config_hash") != cfg.config_hash():
        return []
    ctx.metrics.update(metrics)
    return manifest.get("stages", [])


def _reuse(ctx: RunContext, path: Path) -> list[str]:
    model, meta = load_checkpoint(path, with_metadata=True)
    if meta.get("training_hash") != ctx.cfg.training_hash():
        raise ValueError(f"checkpoint {path} was trained under different dataset/model/train settings")
    ctx.model = model
    target = ctx.path("checkpoint.json")
    if path.resolve() != target.resolve():
        save_checkpoint(model, target, meta)
    rec = reconstruct(model, ctx.features)
    ctx.metrics["reconstruction_mse"] = float(np.mean((rec[:, ctx.data_columns] - ctx.dataset.y) ** 2))
    return ["checkpoint.json"]


def load_run(out) -> tuple[dict, dict]:
    """(manifest, metrics) of a finished run directory."""
    out = Path(out)
    with open(out / "manifest.json") as fh:
        manifest = json.load(fh)
    metrics = {}
    summary = out / "summary.csv"
    if summary.exists():
        with open(summary, newline="") as fh:
            for row in csv.DictReader(fh):
                metrics[row["metric"]] = float(row["value"])
    return manifest, metrics


@dataclass
class SweepResult:
    out: Path
    runs: list[tuple[dict, RunResult]]
    trend: list[dict]


def run_sweep(sweep: SweepConfig, out=None) -> SweepResult:
    """Run every grid point and seed, then write ``trend.csv`` with per-point medians."""
    out = Path(sweep.output_dir if out is None else out)
    runs = []
    for point, cfg in sweep.entries():
        run_dir = out / Path(cfg.output_dir).name
        result = run_experiment(cfg, run_dir)
        # trends use the rounded summaries so a later report rebuilds them exactly
        result.metrics = load_run(run_dir)[1]
        runs.append((point, result))
    trend = trend_table(runs)
    write_trend(trend, out / "trend.csv")
    with open(out / "sweep.json", "w") as fh:
        json.dump({"sweep": sweep.to_dict(),
                   "runs": [{"point": p, "dir": r.out.name, "config_hash": r.manifest["config_hash"],
                             "ok": r.ok} for p, r in runs]}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return SweepResult(out, runs, trend)


def trend_table(runs: list[tuple[dict, RunResult]]) -> list[dict]:
    """Median of every metric across seeds, one row per grid point, in grid order."""
    dataset_seeds = {r.manifest["config"]["dataset"]["seed"] for _, r in runs}
    if len(dataset_seeds) > 1:
        raise ValueError("refusing to pool runs trained on different dataset seeds")
    groups: dict[str, tuple[dict, list[dict]]] = {}
    for point, r in runs:
        key = json.dumps(point, sort_keys=True)
        groups.setdefault(key, (point, []))[1].append(r.metrics)
    table = []
    for point, metrics in groups.values():
        names = sorted(set().union(*metrics))
        row = dict(point)
        row["n_seeds"] = len(metrics)
        for name in names:
            vals = [m[name] for m in metrics if name in m and math.isfinite(m[name])]
            row[name] = float(np.median(vals)) if vals else float("nan")
        table.append(row)
    return table


def write_trend(table: list[dict], path) -> None:
    if not table:
        raise ValueError("empty trend table")
    header = list(table[0])
    for row in table[1:]:
        header += [k for k in row if k not in header]
    write_rows(path, header, [[row.get(k, float("nan")) for k in header] for row in table])
