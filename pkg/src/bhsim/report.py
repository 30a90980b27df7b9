"""Result emission: canonical JSON, delimited sweep tables, and figures.

JSON output is canonical (sorted keys, fixed indentation, no timestamps),
so identical manifest and seed produce byte-identical files regardless of
worker count.  Sweep scenarios additionally get a CSV table matching the
curve axes and a rendered figure next to it.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .config import ScenarioSpec  # noqa: E402
from .scenarios import ScenarioResult  # noqa: E402

SCHEMA_VERSION = 1

SWEEP_COLUMNS = {
    "threshold-sweep": ("K", "init_bias", "history_mode", "predicted_direction"),
    "window-sweep": ("prefix_n", "leak_observed"),
}


def manifest_of(spec: ScenarioSpec) -> dict:
    return {
        "profile": spec.profile.name,
        "scenario": spec.scenario.value,
        "trials": spec.trials,
        "noise": spec.noise,
        "seed": spec.seed,
        "params": {k: v for k, v in sorted(spec.params.items())},
    }


def result_payload(result: ScenarioResult, manifest: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "manifest": manifest,
        "result": result.to_dict(),
    }


def render_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def render_csv(result: ScenarioResult) -> str:
    columns = SWEEP_COLUMNS.get(result.scenario)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    if columns is None:
        writer.writerow(("scenario", "profile", "trials", "successes",
                         "success_rate", "status"))
        writer.writerow((result.scenario, result.profile, result.trials,
                         result.successes, result.success_rate, result.status))
        return out.getvalue()
    writer.writerow(columns)
    for row in result.curves:
        writer.writerow(tuple(row[c] for c in columns))
    return out.getvalue()


def _figure_threshold(result: ScenarioResult, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    series: dict[tuple[str, str], list[tuple[int, int]]] = {}
    for row in result.curves:
        key = (row["init_bias"], row["history_mode"])
        series.setdefault(key, []).append(
            (row["K"], 1 if row["predicted_direction"] == "taken" else 0))
    for (init, mode), pts in sorted(series.items()):
        pts.sort()
        ax.step([k for k, _ in pts], [v for _, v in pts], where="mid",
                marker="o", label=f"{init.upper()}-{mode}")
    ax.set_xlabel("congruent mistrain snippets (K)")
    ax.set_ylabel("victim predicted taken")
    ax.set_yticks([0, 1], ["not-taken", "taken"])
    thr = result.details.get("threshold")
    if thr is not None:
        ax.axvline(thr - 0.5, color="grey", linestyle=":",
                   label=f"eviction threshold = {thr}")
    ax.set_title(f"Mistrain/eviction threshold ({result.profile})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _figure_window(result: ScenarioResult, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    xs = [row["prefix_n"] for row in result.curves]
    ys = [1 if row["leak_observed"] else 0 for row in result.curves]
    ax.step(xs, ys, where="mid", marker="o", label="with eviction")
    base = result.details.get("baseline_no_evict", [])
    if base:
        ax.step([r["prefix_n"] for r in base],
                [1 if r["leak_observed"] else 0 for r in base],
                where="mid", marker="x", linestyle="--", label="no eviction")
    budget = result.details.get("budget")
    if budget is not None:
        ax.axvline(budget + 0.5, color="grey", linestyle=":",
                   label=f"window budget = {budget}")
    ax.set_xlabel("prefix instructions before the leak load")
    ax.set_ylabel("leak observed")
    ax.set_yticks([0, 1], ["no", "yes"])
    ax.set_title(f"Speculation window ({result.profile})")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _figure_biasscope(result: ScenarioResult, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    rates = result.details["per_bit_error_rate"]
    secret = result.details["secret_byte"]
    labels = [f"bit{ch}\n({(secret >> (7 - ch)) & 1})" for ch in range(8)]
    ax.bar(range(8), rates)
    ax.set_xticks(range(8), labels, fontsize=8)
    ax.set_ylabel("per-bit error rate")
    ax.set_title(f"Bit-channel error rates ({result.profile}, "
                 f"noise={result.details.get('noise', '')})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_figures(result: ScenarioResult, outdir: Path) -> list[Path]:
    """Figure files for scenarios that have something to plot."""
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    if result.scenario == "threshold-sweep" and result.curves:
        path = outdir / "threshold_sweep.png"
        _figure_threshold(result, path)
        written.append(path)
    elif result.scenario == "window-sweep" and result.curves:
        path = outdir / "window_sweep.png"
        _figure_window(result, path)
        written.append(path)
    elif result.scenario == "biasscope" and "per_bit_error_rate" in result.details:
        path = outdir / "biasscope_errors.png"
        _figure_biasscope(result, path)
        written.append(path)
    return written


def summary_text(result: ScenarioResult) -> str:
    lines = [
        f"scenario      : {result.scenario}",
        f"profile       : {result.profile}",
        f"status        : {result.status}"
        + (f" ({result.reason})" if result.reason else ""),
        f"trials        : {result.trials}",
        f"successes     : {result.successes}",
        f"success rate  : {result.success_rate:.4f}",
    ]
    for key, value in sorted(result.details.items()):
        if isinstance(value, (int, float, bool, str)):
            lines.append(f"{key:14s}: {value}")
    return "\n".join(lines) + "\n"


def emit_report(result: ScenarioResult, spec: ScenarioSpec, outdir: Path,
                formats: str = "json", figures: bool = True) -> dict[str, Path]:
    """Write result files; returns the paths written.  Re-emit overwrites."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {outdir}: {e}") from e
    written: dict[str, Path] = {}
    payload = result_payload(result, manifest_of(spec))
    if formats in ("json", "both"):
        path = outdir / "result.json"
        path.write_text(render_json(payload))
        written["json"] = path
    if formats in ("csv", "both"):
        path = outdir / ("sweep.csv" if result.scenario in SWEEP_COLUMNS
                         else "summary.csv")
        path.write_text(render_csv(result))
        written["csv"] = path
    if figures:
        for path in render_figures(result, outdir):
            written[path.stem] = path
    return written
