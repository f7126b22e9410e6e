"""Module containing the classes that collect per-epoch training metrics and final evaluation
scores, and convert them to the metrics table written by the CLI"""
import enum
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, f1_score

METRIC_COLUMNS = ("phase", "epoch", "step", "loss", "accuracy", "macro_f", "ms_per_iter")


class Phase(str, enum.Enum):
    """Label of a metrics row. Training phases get one row per epoch; `val` follows every
    epoch of the classifier being trained and `test` is the final held-out evaluation"""

    SKETCH = "sketch"
    SMART = "smart"
    DENSE = "dense"
    VAL = "val"
    TEST = "test"
    EVAL = "eval"


def classification_scores(
    y_true: Sequence[int], y_pred: Sequence[int], n_classes: int
) -> Tuple[float, float]:
    """Accuracy and macro-F over classes `0..n_classes-1`

    A class with no true and no predicted members scores F1 = 0

    Returns
    -------
    Tuple[float, float]
        (accuracy, macro_f)"""
    if len(y_true) == 0:
        raise ValueError("cannot score an empty set of predictions")
    accuracy = float(accuracy_score(y_true, y_pred))
    macro_f = float(
        f1_score(y_true, y_pred, labels=list(range(n_classes)), average="macro", zero_division=0)
    )
    return accuracy, macro_f


@dataclass(frozen=True)
class MetricRow:
    """One line of the metrics table"""

    phase: str
    epoch: int
    step: int
    loss: float
    accuracy: float
    macro_f: float
    ms_per_iter: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase).value)
        for name in ("accuracy", "macro_f"):
            value = getattr(self, name)
            if not (math.isnan(value) or 0.0 <= value <= 1.0):
                raise ValueError("{} must lie in [0, 1], got {}".format(name, value))

    def as_tuple(self) -> tuple:
        return (
            self.phase,
            self.epoch,
            self.step,
            self.loss,
            self.accuracy,
            self.macro_f,
            np.nan if self.ms_per_iter is None else self.ms_per_iter,
        )


class RunMetrics:
    """Ordered collection of :class:`MetricRow`. Collections from consecutive training phases
    are combined with `+`"""

    def __init__(self, rows: Iterable[MetricRow] = ()):
        self._rows: List[MetricRow] = list(rows)

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    def __add__(self, other: "RunMetrics") -> "RunMetrics":
        return RunMetrics(self._rows + list(other))

    def add(self, row: MetricRow) -> MetricRow:
        self._rows.append(row)
        return row

    def record(
        self,
        phase,
        epoch: int,
        step: int,
        loss: float,
        accuracy: float,
        macro_f: float,
        ms_per_iter: Optional[float] = None,
    ) -> MetricRow:
        return self.add(MetricRow(phase, epoch, step, loss, accuracy, macro_f, ms_per_iter))

    def rows(self, phase=None) -> List[MetricRow]:
        if phase is None:
            return list(self._rows)
        phase = Phase(phase).value
        return [row for row in self._rows if row.phase == phase]

    def final(self, phase=None) -> Optional[MetricRow]:
        """The last row, optionally restricted to `phase`"""
        rows = self.rows(phase)
        return rows[-1] if rows else None

    def phases(self) -> List[str]:
        return list(dict.fromkeys(row.phase for row in self._rows))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.as_tuple() for row in self._rows], columns=list(METRIC_COLUMNS))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "RunMetrics":
        rows = []
        for record in frame.to_dict("records"):
            ms = record["ms_per_iter"]
            rows.append(
                MetricRow(
                    str(record["phase"]),
                    int(record["epoch"]),
                    int(record["step"]),
                    float(record["loss"]),
                    float(record["accuracy"]),
                    float(record["macro_f"]),
                    None if pd.isna(ms) else float(ms),
                )
            )
        return cls(rows)
