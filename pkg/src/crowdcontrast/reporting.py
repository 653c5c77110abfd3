"""File and plot emission for metric tables and training logs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluate import MetricsRow, MetricsTable

TABLE_HEADER = "group,n,mae,rmse"


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def table_to_csv(table: MetricsTable) -> str:
    lines = [TABLE_HEADER]
    for r in table.rows:
        lines.append(f"{r.group},{r.n},{_fmt(r.mae)},{_fmt(r.rmse)}")
    return "\n".join(lines) + "\n"


def write_metrics(table: MetricsTable, out_dir: str | Path) -> dict[str, Path]:
    """Write ``table.csv`` (deterministic bytes) and ``metrics.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "table.csv"
    csv_path.write_text(table_to_csv(table), encoding="utf-8")
    json_path = out / "metrics.json"
    payload = {
        "metadata": table.metadata,
        "rows": [
            {"group": r.group, "n": r.n, "mae": r.mae, "rmse": r.rmse}
            for r in table.rows
        ],
    }
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return {"table": csv_path, "json": json_path}


def load_metrics(path: str | Path) -> MetricsTable:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    rows = [MetricsRow(r["group"], r["n"], r["mae"], r["rmse"]) for r in payload["rows"]]
    return MetricsTable(rows=rows, metadata=payload.get("metadata", {}))


def _plot_mae_bars(named_tables: list[tuple[str, MetricsTable]], path: Path) -> None:
    groups = [r.group for r in named_tables[0][1].rows]
    width = 0.8 / len(named_tables)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (name, table) in enumerate(named_tables):
        maes = [r.mae if r.mae is not None else 0.0 for r in table.rows]
        xs = [g + i * width for g in range(len(groups))]
        ax.bar(xs, maes, width=width, label=name)
    ax.set_xticks([g + 0.4 - width / 2 for g in range(len(groups))])
    ax.set_xticklabels(groups, rotation=30)
    ax.set_ylabel("MAE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_loss_curves(named_logs: list[tuple[str, list[dict]]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for name, records in named_logs:
        steps = [r["step"] for r in records]
        ax.plot(steps, [r["total"] for r in records], label=f"{name} total")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report(in_dirs: list[str | Path], out_dir: str | Path) -> dict[str, Path]:
    """Combine evaluation directories into one comparison table plus plots.

    Each input dir must hold a ``metrics.json``; any ``*.log.jsonl`` training
    logs found alongside are drawn as loss curves. The combined CSV is byte
    deterministic for fixed inputs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    named_tables = []
    named_logs = []
    for d in in_dirs:
        d = Path(d)
        named_tables.append((d.name, load_metrics(d / "metrics.json")))
        for log in sorted(d.glob("*.log.jsonl")):
            named_logs.append((f"{d.name}/{log.stem}", _read_jsonl(log)))

    lines = ["source," + TABLE_HEADER]
    for name, table in named_tables:
        for r in table.rows:
            lines.append(f"{name},{r.group},{r.n},{_fmt(r.mae)},{_fmt(r.rmse)}")
    combined = out / "comparison.csv"
    combined.write_text("\n".join(lines) + "\n", encoding="utf-8")

    outputs = {"comparison": combined}
    mae_plot = out / "mae_by_group.png"
    _plot_mae_bars(named_tables, mae_plot)
    outputs["mae_plot"] = mae_plot
    if named_logs:
        loss_plot = out / "loss_curves.png"
        _plot_loss_curves(named_logs, loss_plot)
        outputs["loss_plot"] = loss_plot
    return outputs
