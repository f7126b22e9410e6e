"""Tests for :mod:`smart_bird.printers`"""
import os

import numpy as np
import pandas as pd
import pytest

from smart_bird.cli import evaluate_command
from smart_bird.printers import (
    PRINTERS,
    MarkdownPrinter,
    TextPrinter,
    read_report,
    report_body,
    write_report,
)

FRAME = pd.DataFrame({"k": [1, 8], "accuracy": [0.5, 0.8125], "ms_per_iter": [np.nan, 3.0]})


def test_write_report_layout(tmpdir):
    path = write_report(os.path.join(str(tmpdir), "sub", "t.csv"), FRAME, {"seed": 7})
    with open(path, newline="") as f:
        lines = f.read().split("\n")
    assert lines[0].startswith('# {"created": ')
    assert '"seed": 7' in lines[0]
    assert lines[1:] == ["k,accuracy,ms_per_iter", "1,0.5,", "8,0.8125,3.0", ""]


def test_read_report(tmpdir):
    path = write_report(os.path.join(str(tmpdir), "t.csv"), FRAME, {"lengths": (1, 2)})
    metadata, frame = read_report(path)
    assert metadata["lengths"] == [1, 2]
    pd.testing.assert_frame_equal(frame, FRAME)


def test_report_body_ignores_metadata(tmpdir):
    first = write_report(os.path.join(str(tmpdir), "a.csv"), FRAME, {"created": "yesterday"})
    second = write_report(os.path.join(str(tmpdir), "b.csv"), FRAME)
    assert report_body(first) == report_body(second)


def test_read_report_requires_metadata(tmpdir):
    path = os.path.join(str(tmpdir), "plain.csv")
    FRAME.to_csv(path, index=False)
    with pytest.raises(ValueError, match="metadata"):
        read_report(path)


def test_markdown_printer():
    text = MarkdownPrinter(FRAME, title="ksweep")._generate_string()
    assert text.startswith("## ksweep\n\n| k | accuracy | ms_per_iter |\n|---|---|---|\n")
    assert "| 8 | 0.8125 | 3 |" in text
    assert "| 1 | 0.5 |  |" in text


def test_markdown_table_rejects_ragged_rows():
    with pytest.raises(ValueError):
        MarkdownPrinter._generate_markdown_table(("a", "b"), (("1",),))


def test_text_printer_logs(caplog):
    caplog.set_level("INFO", logger="smart_bird.printers")
    TextPrinter(FRAME, title="eval").print_to_stdout()
    assert "eval" in caplog.text
    assert "0.8125" in caplog.text


def test_text_printer_empty():
    assert TextPrinter(pd.DataFrame(), title="t")._generate_string() == "t\n(no rows)"


def test_printer_choices_match_eval_formats():
    """Every `eval --format` choice has a printer and every printer is reachable"""
    fmt = next(p for p in evaluate_command.params if p.name == "report_format")
    assert sorted(PRINTERS) == sorted(fmt.type.choices)
