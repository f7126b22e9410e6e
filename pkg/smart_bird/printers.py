"""Report emission: every table is written as CSV behind a one-line `# {json}` metadata
comment, and can be echoed to the log as plain text or Markdown"""
import datetime
import json
import logging
import os
from abc import ABC, abstractmethod
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)
logging.basicConfig(level=logging.INFO, format="%(message)s")

METADATA_PREFIX = "# "


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (tuple, set)):
        return list(value)
    return str(value)


def metadata_line(metadata: Dict[str, Any]) -> str:
    return METADATA_PREFIX + json.dumps(metadata, sort_keys=True, default=_jsonable)


def write_report(path: str, frame: pd.DataFrame, metadata: Optional[Dict[str, Any]] = None) -> str:
    """Write `frame` as CSV preceded by its metadata comment line. Missing values are written as
    empty fields and lines end with `\\n`

    Returns
    -------
    String
        `path`"""
    metadata = dict(metadata or {})
    metadata.setdefault("created", datetime.datetime.now().isoformat(timespec="seconds"))
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(metadata_line(metadata) + "\n")
        frame.to_csv(f, index=False, lineterminator="\n")
    logger.debug("wrote %d rows to %s", len(frame), path)
    return path


def read_report(path: str) -> Tuple[Dict[str, Any], pd.DataFrame]:
    """Parse a file written by :func:`write_report`

    Returns
    -------
    Tuple[Dict, pandas.DataFrame]
        The metadata mapping and the table"""
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        if not first.startswith(METADATA_PREFIX):
            raise ValueError("{} does not start with a metadata line".format(path))
        metadata = json.loads(first[len(METADATA_PREFIX) :])
        frame = pd.read_csv(f, float_precision="round_trip")
    return metadata, frame


def report_body(path: str) -> str:
    """The CSV text of a report without its metadata line"""
    with open(path, encoding="utf-8") as f:
        f.readline()
        return f.read()


class Printer(ABC):
    """Base class for displaying one result table in the log

    Parameters
    ----------
    frame: pandas.DataFrame
        The table
    title: String
        Heading shown above the table"""

    def __init__(self, frame: pd.DataFrame, title: str = ""):
        self.frame = frame
        self.title = title

    @abstractmethod
    def _generate_string(self) -> str:
        pass

    def print_to_stdout(self) -> None:
        for line in self._generate_string().split("\n"):
            logger.info(line)


class TextPrinter(Printer):
    """Plain aligned columns"""

    def _generate_string(self) -> str:
        heading = "{}\n".format(self.title) if self.title else ""
        if self.frame.empty:
            return heading + "(no rows)"
        return heading + self.frame.to_string(index=False, float_format="{:.4g}".format)


class MarkdownPrinter(Printer):
    """GitHub-flavoured Markdown table under a `##` heading"""

    def _generate_string(self) -> str:
        heading = "## {}\n\n".format(self.title) if self.title else ""
        rows = tuple(tuple(_cell(v) for v in row) for row in self.frame.itertuples(index=False))
        return heading + self._generate_markdown_table(tuple(self.frame.columns), rows)

    @staticmethod
    def _generate_markdown_table(cols: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
        """Generate markdown table.

        >>> MarkdownPrinter._generate_markdown_table(("k", "accuracy"), (("1", "0.5"),))
        '| k | accuracy |\\n|---|---|\\n| 1 | 0.5 |\\n'
        """
        if not all(len(row) == len(cols) for row in rows):
            raise ValueError("every row needs one value per column")
        lines = ["| " + " | ".join(str(c) for c in cols) + " |", "|" + "---|" * len(cols)]
        lines.extend("| " + " | ".join(row) + " |" for row in rows)
        return "\n".join(lines) + "\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return "" if np.isnan(value) else "{:.4g}".format(value)
    return str(value)


PRINTERS = {"text": TextPrinter, "markdown": MarkdownPrinter}
