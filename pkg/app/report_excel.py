from __future__ import annotations

from io import BytesIO
from typing import Any, Dict, Iterable, List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Alignment, Font, PatternFill
from openpyxl.utils import get_column_letter

TITLE_FILL = PatternFill(fill_type="solid", fgColor="0D6A67")
HEADER_FILL = PatternFill(fill_type="solid", fgColor="DDEEEB")
FAIL_FILL = PatternFill(fill_type="solid", fgColor="F4D6D2")


def _cell_value(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, float) and value != value:
        return "nan"
    return value


def _write_sheet(sheet: Any, title: str, subtitle: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> None:
    sheet["A1"] = title
    sheet["A2"] = subtitle
    sheet["A1"].font = Font(size=16, bold=True, color="FFFFFF")
    sheet["A1"].fill = TITLE_FILL
    sheet.append([])
    sheet.append(list(columns))
    for cell in sheet[4]:
        cell.font = Font(bold=True)
        cell.fill = HEADER_FILL
        cell.alignment = Alignment(horizontal="center", vertical="center")
    for row in rows:
        sheet.append([_cell_value(row.get(column)) for column in columns])
    sheet.freeze_panes = "A5"
    for index, column in enumerate(columns, start=1):
        sheet.column_dimensions[get_column_letter(index)].width = max(12, len(column) + 4)


def build_experiment_xlsx(
    *,
    run_label: str,
    eval_columns: Optional[Sequence[str]] = None,
    eval_rows: Optional[Iterable[Dict[str, Any]]] = None,
    pose_columns: Optional[Sequence[str]] = None,
    pose_rows: Optional[Iterable[Dict[str, Any]]] = None,
    checks: Optional[Iterable[Dict[str, Any]]] = None,
) -> bytes:
    """Workbook with one sheet per report that was produced, plus acceptance checks when given."""
    workbook = Workbook()
    sheets_written = 0
    sections: List[tuple] = []
    if eval_columns and eval_rows is not None:
        sections.append(("eval", "Correspondence evaluation", eval_columns, list(eval_rows)))
    if pose_columns and pose_rows is not None:
        sections.append(("pose", "Relative pose", pose_columns, list(pose_rows)))
    if checks is not None:
        check_rows = [
            {**check, "ok": "OK" if check.get("ok") else "FAIL"}
            for check in checks
        ]
        sections.append(("checks", "Acceptance checks", ("name", "ok", "actual", "direction", "expected"), check_rows))
    if not sections:
        raise ValueError("nothing to export")

    for name, title, columns, rows in sections:
        sheet = workbook.active if sheets_written == 0 else workbook.create_sheet()
        sheet.title = name
        _write_sheet(sheet, title, f"run: {run_label}", columns, rows)
        if name == "checks":
            for row in sheet.iter_rows(min_row=5, max_row=sheet.max_row):
                if row[1].value == "FAIL":
                    for cell in row:
                        cell.fill = FAIL_FILL
        sheets_written += 1

    stream = BytesIO()
    workbook.save(stream)
    return stream.getvalue()
