"""
Report artifacts: JSON documents, CSV summary tables, ranking tables and
matplotlib plots. Plots use the Agg backend and never open windows.
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from ..domain import EvalResult, RankingReport  # noqa: E402

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["method", "setting", "branch", "accuracy", "ci95", "n_episodes"]


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def summary_rows(method: str, results: Iterable[EvalResult], setting_suffix: str = "") -> list[dict[str, Any]]:
    """One table row per (setting, branch): method x setting x accuracy +- CI."""
    return [
        {
            "method": method,
            "setting": result.spec.label() + setting_suffix,
            "branch": result.branch,
            "accuracy": round(result.mean_accuracy, 4),
            "ci95": round(result.ci95, 4),
            "n_episodes": result.n_episodes,
        }
        for result in results
    ]


def write_csv(rows: Sequence[dict[str, Any]], path: Union[str, Path], columns: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns) or None)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def ranking_payload(report: RankingReport) -> dict[str, Any]:
    return {
        "class_names": {str(k): v for k, v in sorted(report.class_names.items())},
        "mean_true_rank": report.mean_true_rank,
        "queries": [
            {
                "query_index": q.query_index,
                "true_class": q.true_class,
                "true_rank": q.true_rank,
                "ranking": [[c, s] for c, s in q.ranking],
            }
            for q in report.queries
        ],
    }


def format_ranking(report: RankingReport) -> str:
    """Human-readable ranking table, one line per query."""
    lines = [f"mean ground-truth rank: {report.mean_true_rank:.3f}", ""]
    for q in report.queries:
        ordered = "  ".join(
            f"{report.class_names.get(c, c)}({score:.3f})" for c, score in q.ranking
        )
        truth = report.class_names.get(q.true_class, q.true_class)
        lines.append(f"query {q.query_index:3d}  truth={truth}  rank={q.true_rank}  | {ordered}")
    return "\n".join(lines) + "\n"


def plot_training_curves(history: Sequence[dict[str, Any]], path: Union[str, Path]) -> Path:
    """Loss components per epoch, and val accuracy plus prototype dispersion when present."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(history))
    fig, (loss_ax, acc_ax) = plt.subplots(1, 2, figsize=(11, 4), dpi=100)
    try:
        for column in ("total_loss", "global_loss", "local_loss", "mutual_loss"):
            if column in frame:
                loss_ax.plot(frame["epoch"], frame[column], label=column.replace("_loss", ""))
        loss_ax.set_xlabel("epoch")
        loss_ax.set_ylabel("loss")
        loss_ax.legend()

        for column in ("val_fused", "val_global", "val_local"):
            if column in frame and frame[column].notna().any():
                acc_ax.plot(frame["epoch"], frame[column], label=column.replace("val_", ""))
        acc_ax.set_xlabel("epoch")
        acc_ax.set_ylabel("val accuracy (%)")
        if "dispersion" in frame and frame["dispersion"].notna().any():
            twin = acc_ax.twinx()
            twin.plot(frame["epoch"], frame["dispersion"], "k--", label="dispersion")
            twin.set_ylabel("prototype dispersion")
        if acc_ax.lines:
            acc_ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="png")
    finally:
        plt.close(fig)
    return path


def plot_accuracy_by_setting(rows: Sequence[dict[str, Any]], path: Union[str, Path]) -> Path:
    """Grouped bars of accuracy +- CI per setting and branch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    pivot = frame.pivot_table(index="setting", columns="branch", values="accuracy", sort=False)
    errors = frame.pivot_table(index="setting", columns="branch", values="ci95", sort=False)
    fig, ax = plt.subplots(figsize=(max(5, 2 * len(pivot)), 4), dpi=100)
    try:
        pivot.plot.bar(ax=ax, yerr=errors, capsize=3, rot=0)
        ax.set_ylabel("accuracy (%)")
        fig.tight_layout()
        fig.savefig(path, format="png")
    finally:
        plt.close(fig)
    return path
