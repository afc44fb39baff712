from __future__ import annotations

from io import BytesIO

import pytest
from openpyxl import load_workbook

from app.metrics import EVAL_COLUMNS, evaluate_acceptance
from app.report_excel import build_experiment_xlsx


def test_workbook_has_one_sheet_per_report() -> None:
    checks = evaluate_acceptance({"aepe": 1.0, "pck3": 0.2, "jaccard": 0.9})["checks"]

    payload = build_experiment_xlsx(
        run_label="runs/demo",
        eval_columns=EVAL_COLUMNS,
        eval_rows=[{"pair_id": "00000", "aepe": 0.5, "pck1": 0.9, "pck3": 1.0, "pck5": 1.0, "jaccard": "", "n_valid": 256}],
        checks=checks,
    )

    workbook = load_workbook(BytesIO(payload))
    assert workbook.sheetnames == ["eval", "checks"]
    sheet = workbook["eval"]
    assert sheet["A1"].value == "Correspondence evaluation"
    assert sheet["A2"].value == "run: runs/demo"
    assert [cell.value for cell in sheet[4]] == list(EVAL_COLUMNS)
    assert sheet["A5"].value == "00000"
    assert sheet["B5"].value == 0.5

    rows = {row[0].value: row[1].value for row in workbook["checks"].iter_rows(min_row=5)}
    assert rows == {"pck3": "FAIL", "jaccard": "OK"}


def test_pose_sheet_and_nan_cells() -> None:
    payload = build_experiment_xlsx(
        run_label="pose",
        pose_columns=("pair_id", "rot_err_deg"),
        pose_rows=[{"pair_id": "00001", "rot_err_deg": float("nan")}],
    )

    sheet = load_workbook(BytesIO(payload))["pose"]
    assert sheet["B5"].value == "nan"


def test_nothing_to_export() -> None:
    with pytest.raises(ValueError, match="nothing to export"):
        build_experiment_xlsx(run_label="empty")
