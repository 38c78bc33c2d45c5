"""
Excel report for toy training runs.

Sheets:
- "Summary"    : one row per run: normalisation, final accuracies, baseline, timing
- "Epochs"     : per-epoch loss / accuracy / column-sum range for every run
- "Column sums": monitor-batch column-sum histogram of the first and last epoch
"""

from typing import Dict

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

from services.errors import InvalidParameterError
from services.training import TrainingResult
from utils.io import atomic_path
from utils.logger import logger

# ─── Colours ─────────────────────────────────────────────────────────────────
COLOR_GREEN = "C6EFCE"   # reached target accuracy
COLOR_YELLOW = "FFEB9C"  # above baseline only
COLOR_RED = "FFC7CE"     # at or below baseline
COLOR_GRAY = "D9D9D9"    # header
COLOR_LIGHT_GRAY = "F2F2F2"

TARGET_ACCURACY = 0.9


# ─── Helpers ─────────────────────────────────────────────────────────────────

def _fill(color: str) -> PatternFill:
    return PatternFill(start_color=color, end_color=color, fill_type="solid")


def _bold(size: int = 11) -> Font:
    return Font(bold=True, size=size)


def _center() -> Alignment:
    return Alignment(horizontal="center", vertical="center", wrap_text=True)


def _auto_width(ws, min_w: int = 8, max_w: int = 40) -> None:
    for col in ws.columns:
        best = max((len(str(cell.value)) for cell in col if cell.value is not None), default=0)
        ws.column_dimensions[get_column_letter(col[0].column)].width = min(max(best + 2, min_w), max_w)


def _header_row(ws, row: int, n_cols: int, bg: str = COLOR_GRAY) -> None:
    for c in range(1, n_cols + 1):
        cell = ws.cell(row=row, column=c)
        cell.font = _bold()
        cell.fill = _fill(bg)
        cell.alignment = _center()


def _accuracy_color(accuracy: float, baseline: float) -> str:
    if accuracy >= TARGET_ACCURACY:
        return COLOR_GREEN
    if accuracy > baseline:
        return COLOR_YELLOW
    return COLOR_RED


# ─── Sheet 1: Summary ────────────────────────────────────────────────────────

def _create_summary_sheet(wb: Workbook, runs: Dict[str, TrainingResult]) -> None:
    ws = wb.active
    ws.title = "Summary"
    ws.append(["Toy training runs"])
    ws.cell(row=1, column=1).font = _bold(14)
    ws.append([])

    headers = [
        "Run", "Normalization", "Dataset", "Epochs", "Final loss", "Train acc.",
        "Test acc.", "Baseline acc.", "Column-sum spread", "Mean epoch (s)",
    ]
    ws.append(headers)
    _header_row(ws, ws.max_row, len(headers))
    for name, run in runs.items():
        last = run.final
        ws.append([
            name,
            str(run.config.normalization),
            run.config.dataset,
            last.epoch,
            round(last.train_loss, 6),
            round(last.train_accuracy, 4),
            round(last.test_accuracy, 4),
            round(run.baseline_accuracy, 4),
            last.column_sums.spread,
            round(run.mean_epoch_seconds(), 4),
        ])
        ws.cell(row=ws.max_row, column=7).fill = _fill(
            _accuracy_color(last.test_accuracy, run.baseline_accuracy)
        )
    _auto_width(ws)


# ─── Sheet 2: Epochs ─────────────────────────────────────────────────────────

def _create_epochs_sheet(wb: Workbook, runs: Dict[str, TrainingResult]) -> None:
    ws = wb.create_sheet("Epochs")
    headers = ["Run", "Epoch", "Train loss", "Train acc.", "Test acc.", "Col-sum min", "Col-sum max", "Seconds"]
    ws.append(headers)
    _header_row(ws, 1, len(headers))
    for name, run in runs.items():
        for i, r in enumerate(run.records):
            ws.append([
                name, r.epoch, r.train_loss, r.train_accuracy, r.test_accuracy,
                r.column_sums.minimum, r.column_sums.maximum, round(r.epoch_seconds, 4),
            ])
            if i % 2:
                for c in range(1, len(headers) + 1):
                    ws.cell(row=ws.max_row, column=c).fill = _fill(COLOR_LIGHT_GRAY)
    ws.freeze_panes = "A2"
    _auto_width(ws)


# ─── Sheet 3: Column sums ────────────────────────────────────────────────────

def _create_colsums_sheet(wb: Workbook, runs: Dict[str, TrainingResult]) -> None:
    ws = wb.create_sheet("Column sums")
    headers = ["Run", "Epoch", "Bin left", "Bin right", "Count"]
    ws.append(headers)
    _header_row(ws, 1, len(headers))
    for name, run in runs.items():
        for r in {run.records[0].epoch: run.records[0], run.final.epoch: run.final}.values():
            edges = r.column_sums.bin_edges
            for k, count in enumerate(r.column_sums.histogram):
                if count:
                    ws.append([name, r.epoch, float(edges[k]), float(edges[k + 1]), int(count)])
            if r.column_sums.overflow:
                ws.append([name, r.epoch, float(edges[-1]), "inf", r.column_sums.overflow])
    _auto_width(ws)


def generate_training_report(runs: Dict[str, TrainingResult], path: str) -> str:
    """
    Write the workbook for one or more named runs.

    Returns:
        The path written.
    """
    if not runs:
        raise InvalidParameterError("report needs at least one training run")
    logger.info(f"Generating training report for {len(runs)} run(s)…")

    wb = Workbook()
    _create_summary_sheet(wb, runs)
    _create_epochs_sheet(wb, runs)
    _create_colsums_sheet(wb, runs)

    with atomic_path(path) as tmp:
        wb.save(tmp)
    logger.info(f"Training report saved: {path} ({len(wb.sheetnames)} sheets)")
    return path

