"""Experiment report assembly, schema validation, and plot emission.

The JSON report is canonical and schema-validated; CSV tables and trace
plots are derived views of the same numbers.  Apart from ``generated_at``
the report is a pure function of (config, runs), so reruns are comparable
byte for byte.
"""

from __future__ import annotations

import csv
import datetime
import importlib.metadata
import importlib.resources
import json
import os
import platform

import jsonschema
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import theory  # noqa: E402

__all__ = [
    "ReportError",
    "CROSSCHECK_TOLERANCE",
    "theory_summary",
    "make_report",
    "validate_report",
    "write_report",
    "plot_trace",
]

CROSSCHECK_TOLERANCE = 1e-8


class ReportError(ValueError):
    """Report failed schema validation; ``pointer`` locates the field."""

    def __init__(self, pointer: str, detail: str):
        self.pointer = pointer
        super().__init__(f"report error at {pointer or '/'}: {detail}")


def _schema() -> dict:
    text = importlib.resources.files("fdlab.schemas").joinpath(
        "report.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict):
    validator = jsonschema.Draft7Validator(_schema())
    errors = sorted(validator.iter_errors(report),
                    key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(part) for part in err.absolute_path)
        raise ReportError(pointer if pointer != "/" else "", err.message)


def theory_summary(logit_lo: float = 0.0, logit_hi: float = 5.0,
                   step: float = 0.1, biases=(-1.0, 0.0, 1.0)) -> dict:
    """Run the verification grids plus a coarse autodiff cross-check."""
    suppression = theory.sweep_suppression_grid(logit_lo, logit_hi, step, biases)
    ordering = theory.sweep_gap_ordering_grid(logit_lo, logit_hi, step, biases)
    max_delta = theory.crosscheck_grid(biases=biases)
    crosscheck_passed = max_delta <= CROSSCHECK_TOLERANCE

    return {
        "suppression": {
            "points": len(suppression.rows),
            "counterexamples": len(suppression.counterexamples),
            "passed": suppression.passed,
        },
        "gap_ordering": {
            "points": len(ordering.rows),
            "counterexamples": len(ordering.counterexamples),
            "passed": ordering.passed,
        },
        "crosscheck_max_delta": max_delta,
        "crosscheck_passed": crosscheck_passed,
        "passed": suppression.passed and ordering.passed and crosscheck_passed,
    }


def _versions() -> dict:
    try:
        own = importlib.metadata.version("fdlab")
    except importlib.metadata.PackageNotFoundError:
        own = "unknown"
    return {
        "fdlab": own,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def make_report(config, ablation_rows, ratio_rows, probe_rows,
                theory_section, run_dirs: dict) -> dict:
    """Assemble and validate the full report document."""
    report = {
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "ablation": list(ablation_rows),
        "gradient_ratios": list(ratio_rows),
        "probes": list(probe_rows),
        "theory": theory_section,
        "provenance": {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "versions": _versions(),
            "run_dirs": dict(run_dirs),
        },
    }
    validate_report(report)
    return report


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def plot_trace(path, variant: str, steps, branch1_norms, branch2_norms):
    """Line plot of per-step probe-stage gradient norms for one run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, branch1_norms, label="branch 1 (m1)")
    ax.plot(steps, branch2_norms, label="branch 2 (m2)")
    ax.set_xlabel("step")
    ax.set_ylabel("probe-stage gradient norm")
    ax.set_title(variant)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(out_dir, report: dict, traces: dict = None):
    """Write report.json plus CSV tables and per-variant trace plots.

    traces maps variant name -> GradientTrace (or None to skip plots).
    Returns the list of paths written.
    """
    validate_report(report)
    written = []

    path = os.path.join(out_dir, "report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    written.append(path)

    path = os.path.join(out_dir, "ablation.csv")
    _write_csv(path, ["variant", "mean_ap50", "mean_ap75", "mean_ap50_95",
                      "final_loss", "run_dir"], report["ablation"])
    written.append(path)

    path = os.path.join(out_dir, "gradient_ratios.csv")
    _write_csv(path, ["variant", "reference", "branch1", "branch2"],
               report["gradient_ratios"])
    written.append(path)

    path = os.path.join(out_dir, "probes.csv")
    _write_csv(path, ["variant", "branch", "ap50", "ap50_95", "run_dir"],
               report["probes"])
    written.append(path)

    for variant, trace in (traces or {}).items():
        path = os.path.join(out_dir, f"trace_{variant}.png")
        plot_trace(path, variant, trace.steps,
                   trace.branch1_norms, trace.branch2_norms)
        written.append(path)

    return written
