"""Command-line entry points for data generation, training, and reporting.

Every command reads one JSON config (all keys optional, defaults documented
in the README); flags only override config fields.  Artifacts land under the
config's output directory and are never overwritten unless --force is given.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor

import click

from . import detector as det
from . import evaluate as ev
from . import reports
from . import synthgen
from . import theory
from .config import ConfigError, parse_config
from .router import RoutePlan
from .train import GradientTrace, linear_probe, train_model

log = logging.getLogger("fdlab.cli")

ABLATION_VARIANTS = ("baseline", "rsc", "rsc-md")

_LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


@click.group()
def main():
    """Factor-decoupled gradient routing lab."""
    name = os.environ.get("FDL_LOG_LEVEL", "warn").lower()
    if name not in _LOG_LEVELS:
        raise click.UsageError(
            f"FDL_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LOG_LEVELS[name],
                        format="%(levelname)s %(name)s: %(message)s")


def _read_document(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise click.ClickException(f"cannot read config: {exc}")
    except json.JSONDecodeError as exc:
        raise click.ClickException(f"config is not valid JSON: {exc}")


def _effective_config(config_path, out, seed):
    """Parse the config document with CLI flag overrides applied."""
    document = _read_document(config_path)
    if not isinstance(document, dict):
        raise click.ClickException("config must be a JSON object")
    if seed is not None:
        document["seed"] = seed
    if out is not None:
        document["output_dir"] = str(out)
    try:
        return parse_config(document)
    except ConfigError as exc:
        raise click.ClickException(str(exc))


def _claim_path(path, force: bool):
    """Refuse to overwrite an existing artifact unless --force."""
    if os.path.exists(path):
        if not force:
            raise click.ClickException(f"{path} exists; rerun with --force")
        if os.path.isdir(path):
            shutil.rmtree(path)
        else:
            os.remove(path)


def _split_dir(cfg, split: str) -> str:
    return os.path.join(cfg.output_dir, "data", split)


def _load_split(cfg, split: str):
    directory = _split_dir(cfg, split)
    if not os.path.isdir(directory):
        raise click.ClickException(
            f"dataset split missing at {directory}; run gen-data first")
    handle = synthgen.read_dataset(directory)
    if handle.spec != cfg.scene_spec(split):
        raise click.ClickException(
            f"dataset at {directory} was generated from a different config; "
            "regenerate with gen-data --force")
    return handle.load_all()


def _generate_split(cfg, split: str, workers: int):
    directory = _split_dir(cfg, split)
    p1, p2 = cfg.profiles()
    synthgen.write_dataset(directory, cfg.scene_spec(split), p1, p2,
                           cfg.split_count(split), workers=workers)
    return directory


def _run_dir(cfg, variant: str) -> str:
    return os.path.join(cfg.output_dir, "runs", variant)


config_option = click.option("--config", "config_path",
                             type=click.Path(exists=True, dir_okay=False),
                             default=None, help="JSON config file.")
out_option = click.option("--out", type=click.Path(file_okay=False),
                          default=None, help="Override the output directory.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Override the config seed.")
workers_option = click.option("--workers", type=click.IntRange(min=1),
                              default=1, help="Worker process count.")
force_option = click.option("--force", is_flag=True,
                            help="Overwrite existing artifacts.")


# ---------------------------------------------------------------------------
# verify-theory
# ---------------------------------------------------------------------------

_GRID_DEFAULTS = {
    "logit_min": 0.0,
    "logit_max": 5.0,
    "step": 0.1,
    "biases": [-1.0, 0.0, 1.0],
}


def _grid_config(path):
    document = _read_document(path)
    if not isinstance(document, dict):
        raise click.ClickException("grid config must be a JSON object")
    for key in document:
        if key not in _GRID_DEFAULTS:
            raise click.ClickException(f"config error at /{key}: unknown key")
    merged = {**_GRID_DEFAULTS, **document}
    if (not isinstance(merged["biases"], list) or not merged["biases"]
            or not all(isinstance(b, (int, float)) and not isinstance(b, bool)
                       for b in merged["biases"])):
        raise click.ClickException(
            "config error at /biases: need a non-empty list of numbers")
    for key in ("logit_min", "logit_max", "step"):
        value = merged[key]
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise click.ClickException(f"config error at /{key}: must be a number")
    if not merged["step"] > 0:
        raise click.ClickException("config error at /step: step must be positive")
    return merged


@main.command("verify-theory")
@config_option
@out_option
@force_option
@click.pass_context
def verify_theory(ctx, config_path, out, force):
    """Sweep the gradient-factor inequalities and cross-check the tape."""
    grid = _grid_config(config_path)
    out_dir = out or "."
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "suppression": os.path.join(out_dir, "suppression_grid.csv"),
        "gap_ordering": os.path.join(out_dir, "gap_ordering_grid.csv"),
    }
    for path in paths.values():
        _claim_path(path, force)

    args = (grid["logit_min"], grid["logit_max"], grid["step"],
            tuple(grid["biases"]))
    suppression = theory.sweep_suppression_grid(*args)
    ordering = theory.sweep_gap_ordering_grid(*args)
    theory.write_grid_csv(paths["suppression"], suppression)
    theory.write_grid_csv(paths["gap_ordering"], ordering)
    max_delta = theory.crosscheck_grid(biases=tuple(grid["biases"]))
    crosscheck_ok = max_delta <= reports.CROSSCHECK_TOLERANCE

    click.echo(f"suppression grid: {len(suppression.rows)} points, "
               f"{len(suppression.counterexamples)} counterexamples")
    click.echo(f"gap-ordering grid: {len(ordering.rows)} points, "
               f"{len(ordering.counterexamples)} counterexamples")
    click.echo(f"autodiff cross-check: max deviation {max_delta:.3e} "
               f"(tolerance {reports.CROSSCHECK_TOLERANCE:.0e})")

    bad = suppression.counterexamples + ordering.counterexamples
    for row in bad[:10]:
        click.echo(f"  counterexample: m1={row.m1_logit:g} m2={row.m2_logit:g} "
                   f"bias={row.bias:g} suppression_ok={row.suppression_ok} "
                   f"ordering_ok={row.ordering_ok}")
    if len(bad) > 10:
        click.echo(f"  ... and {len(bad) - 10} more")

    if bad or not crosscheck_ok:
        ctx.exit(1)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


@main.command("gen-data")
@config_option
@out_option
@seed_option
@workers_option
@force_option
def gen_data(config_path, out, seed, workers, force):
    """Write the synthetic train and test splits to <output_dir>/data."""
    cfg = _effective_config(config_path, out, seed)
    for split in ("train", "test"):
        _claim_path(_split_dir(cfg, split), force)
    for split in ("train", "test"):
        directory = _generate_split(cfg, split, workers)
        click.echo(f"wrote {cfg.split_count(split)} samples to {directory}")


# ---------------------------------------------------------------------------
# train / probe / eval
# ---------------------------------------------------------------------------


def _train_variant(cfg, variant: str, train_samples) -> dict:
    """Train one route variant and write its run directory."""
    model = det.DualBranchDetector(cfg.detector_config(), cfg.seed,
                                   RoutePlan.from_preset(variant))
    result = train_model(model, train_samples, cfg.optimizer_config(),
                         cfg.loss_weights())
    run_dir = _run_dir(cfg, variant)
    os.makedirs(run_dir, exist_ok=True)
    det.save_checkpoint(os.path.join(run_dir, "checkpoint"), model,
                        extra={"preset": variant,
                               "config_hash": cfg.config_hash()})
    result.trace.write_csv(os.path.join(run_dir, "trace.csv"))
    with open(os.path.join(run_dir, "train.json"), "w") as fh:
        json.dump({"variant": variant, "final_loss": result.final_loss,
                   "steps": len(result.trace.steps)}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    return {"model": model, "result": result, "run_dir": run_dir}


def _load_run(cfg, variant: str):
    run_dir = _run_dir(cfg, variant)
    checkpoint = os.path.join(run_dir, "checkpoint")
    if not os.path.isdir(checkpoint):
        raise click.ClickException(
            f"no checkpoint at {checkpoint}; run train first")
    model, manifest = det.load_checkpoint(checkpoint)
    return model, manifest, run_dir


@main.command()
@config_option
@out_option
@seed_option
@force_option
def train(config_path, out, seed, force):
    """Train the configured route variant on the generated dataset."""
    cfg = _effective_config(config_path, out, seed)
    variant = cfg.route_preset
    _claim_path(_run_dir(cfg, variant), force)
    train_samples = _load_split(cfg, "train")
    handle = _train_variant(cfg, variant, train_samples)
    click.echo(f"trained {variant}: final loss "
               f"{handle['result'].final_loss:.4f} -> {handle['run_dir']}")


@main.command()
@config_option
@out_option
@seed_option
@force_option
def probe(config_path, out, seed, force):
    """Linear-probe both backbones of a trained checkpoint."""
    cfg = _effective_config(config_path, out, seed)
    model, _, run_dir = _load_run(cfg, cfg.route_preset)
    path = os.path.join(run_dir, "probes.json")
    _claim_path(path, force)
    train_samples = _load_split(cfg, "train")
    test_samples = _load_split(cfg, "test")
    rows = []
    for branch in ("m1", "m2"):
        result = linear_probe(model, branch, train_samples, test_samples,
                              cfg.optimizer_config(), cfg.loss_weights(),
                              head_seed=cfg.seed)
        rows.append({"variant": cfg.route_preset, "branch": branch,
                     "ap50": result.ap50, "ap50_95": result.ap50_95,
                     "run_dir": run_dir})
        click.echo(f"probe {branch}: AP50 {result.ap50:.4f} "
                   f"AP50-95 {result.ap50_95:.4f}")
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


@main.command("eval")
@config_option
@out_option
@seed_option
@force_option
def eval_cmd(config_path, out, seed, force):
    """Evaluate a trained checkpoint on the test split."""
    cfg = _effective_config(config_path, out, seed)
    model, _, run_dir = _load_run(cfg, cfg.route_preset)
    path = os.path.join(run_dir, "eval.json")
    _claim_path(path, force)
    test_samples = _load_split(cfg, "test")
    result = ev.evaluate_model(model, test_samples,
                               batch_size=cfg.optimizer["batch_size"])
    payload = {
        "variant": cfg.route_preset,
        "mean_ap50": result.mean_ap50,
        "mean_ap75": result.mean_ap75,
        "mean_ap50_95": result.mean_ap50_95,
        "per_class_ap50": result.per_class_ap50,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"eval {cfg.route_preset}: AP50 {result.mean_ap50:.4f} "
               f"AP50-95 {result.mean_ap50_95:.4f}")


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _ablate_worker(document: dict, variant: str) -> dict:
    """Train + evaluate + probe one variant; returns JSON-ready rows."""
    cfg = parse_config(document)
    train_samples = _load_split(cfg, "train")
    test_samples = _load_split(cfg, "test")
    handle = _train_variant(cfg, variant, train_samples)
    model, result, run_dir = handle["model"], handle["result"], handle["run_dir"]

    evaluation = ev.evaluate_model(model, test_samples,
                                   batch_size=cfg.optimizer["batch_size"])
    ablation_row = {
        "variant": variant,
        "mean_ap50": evaluation.mean_ap50,
        "mean_ap75": evaluation.mean_ap75,
        "mean_ap50_95": evaluation.mean_ap50_95,
        "final_loss": result.final_loss,
        "run_dir": run_dir,
    }
    probe_rows = []
    for branch in ("m1", "m2"):
        probed = linear_probe(model, branch, train_samples, test_samples,
                              cfg.optimizer_config(), cfg.loss_weights(),
                              head_seed=cfg.seed)
        probe_rows.append({"variant": variant, "branch": branch,
                           "ap50": probed.ap50, "ap50_95": probed.ap50_95,
                           "run_dir": run_dir})
    return {"variant": variant, "ablation_row": ablation_row,
            "probe_rows": probe_rows, "run_dir": run_dir}


@main.command()
@config_option
@out_option
@seed_option
@workers_option
@force_option
def ablate(config_path, out, seed, workers, force):
    """Run the three-variant matrix on shared data and write the report."""
    cfg = _effective_config(config_path, out, seed)
    document = cfg.to_dict()

    report_path = os.path.join(cfg.output_dir, "report.json")
    _claim_path(report_path, force)
    for variant in ABLATION_VARIANTS:
        _claim_path(_run_dir(cfg, variant), force)

    if not all(os.path.isdir(_split_dir(cfg, s)) for s in ("train", "test")):
        log.info("dataset missing; generating")
        for split in ("train", "test"):
            _claim_path(_split_dir(cfg, split), force)
            _generate_split(cfg, split, workers)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(ABLATION_VARIANTS))) as pool:
            futures = [pool.submit(_ablate_worker, document, v)
                       for v in ABLATION_VARIANTS]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_ablate_worker(document, v) for v in ABLATION_VARIANTS]
    outcomes.sort(key=lambda o: ABLATION_VARIANTS.index(o["variant"]))

    traces = {
        o["variant"]: GradientTrace.read_csv(os.path.join(o["run_dir"], "trace.csv"))
        for o in outcomes
    }
    baseline_means = traces["baseline"].mean_norms()
    ratio_rows = []
    for variant in ("rsc", "rsc-md"):
        means = traces[variant].mean_norms()
        ratio_rows.append({
            "variant": variant,
            "reference": "baseline",
            "branch1": means[0] / baseline_means[0],
            "branch2": means[1] / baseline_means[1],
        })

    report = reports.make_report(
        cfg,
        ablation_rows=[o["ablation_row"] for o in outcomes],
        ratio_rows=ratio_rows,
        probe_rows=[row for o in outcomes for row in o["probe_rows"]],
        theory_section=reports.theory_summary(),
        run_dirs={o["variant"]: o["run_dir"] for o in outcomes},
    )
    written = reports.write_report(cfg.output_dir, report, traces)
    for row in report["ablation"]:
        click.echo(f"{row['variant']}: AP50-95 {row['mean_ap50_95']:.4f}")
    click.echo(f"report written to {written[0]}")


if __name__ == "__main__":
    main()
