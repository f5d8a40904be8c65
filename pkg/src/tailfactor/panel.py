"""Panel data containers, ingestion/serialization, and the check-loss primitive.

Conventions used throughout the package:

* Panels are N x T matrices: rows are cross-section units, columns are time
  periods.
* Tail levels ``tau`` are *upper-tail* probabilities: small ``tau`` means far
  out in the right tail.  The check loss below is parameterized so that the
  minimizer of ``sum(check_loss(z - q, tau))`` over ``q`` is the empirical
  ``(1 - tau)``-quantile of the sample, i.e. the level-``tau`` upper-tail
  quantile.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import (
    ArgumentError,
    DataError,
    DuplicateCellError,
    IncompleteGridError,
    NonFiniteValueError,
)

PANEL_FORMATS = ("wide-csv", "long-csv", "json")
RESULT_SCHEMA_VERSION = 1


def check_loss(x, tau):
    """Tail check loss ``(1(x > 0) - tau) * x``.

    Nonnegative, convex in ``x``, zero iff ``x == 0``.  Accepts scalars or
    arrays (applied elementwise).

    Parameters
    ----------
    x : float or array-like
        Residual(s).
    tau : float
        Upper-tail level in (0, 1).
    """
    if not 0.0 < tau < 1.0:
        raise ArgumentError(f"tau must lie in (0, 1), got {tau}")
    x = np.asarray(x, dtype=float)
    out = (np.greater(x, 0.0).astype(float) - tau) * x
    if out.ndim == 0:
        return float(out)
    return out


def _check_labels(labels: Sequence, kind: str, expected: int) -> tuple:
    labels = tuple(labels)
    if len(labels) != expected:
        raise ArgumentError(
            f"{kind} labels have length {len(labels)}, expected {expected}"
        )
    if len(set(labels)) != len(labels):
        raise DataError(f"duplicate {kind} labels")
    return labels


@dataclass(frozen=True)
class PanelData:
    """Immutable N x T panel of real observations with axis labels."""

    values: np.ndarray
    unit_labels: tuple = ()
    time_labels: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim != 2:
            raise ArgumentError(f"panel values must be 2-d, got shape {values.shape}")
        n, t = values.shape
        if n < 2 or t < 2:
            raise ArgumentError(f"panel must be at least 2x2, got {n}x{t}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValueError(
                f"non-finite value at unit index {bad[0]}, time index {bad[1]}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        units = self.unit_labels or tuple(f"u{i + 1}" for i in range(n))
        times = self.time_labels or tuple(f"t{j + 1}" for j in range(t))
        object.__setattr__(self, "unit_labels", _check_labels(units, "unit", n))
        object.__setattr__(self, "time_labels", _check_labels(times, "time", t))

    @property
    def n_units(self) -> int:
        return self.values.shape[0]

    @property
    def n_periods(self) -> int:
        return self.values.shape[1]

    @property
    def n_cells(self) -> int:
        return self.values.size

    def flatten_time_major(self) -> np.ndarray:
        """All units at t=1, then all units at t=2, and so on."""
        return self.values.T.reshape(-1)


@dataclass(frozen=True)
class TailConfig:
    """Tuning constants for tail estimation.

    k is the intermediate order (number of top order statistics), (m, M] the
    box bounds on the volatility surface, p the extreme tail level, tau_star
    the central level used by threshold models, c_ic the information-criterion
    constant, and r_max the largest candidate factor count.
    """

    k: int
    m: float = 0.1
    M: float = 1.6
    p: float | None = None
    tau_star: float = 0.5
    c_ic: float = 10.0
    r_max: int = 3

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ArgumentError(f"k must be a positive integer, got {self.k}")
        object.__setattr__(self, "k", int(self.k))
        if not self.m > 0:
            raise ArgumentError(f"m must be positive, got {self.m}")
        if not (self.m <= 1.0 <= self.M):
            raise ArgumentError(f"bounds must satisfy m <= 1 <= M, got m={self.m}, M={self.M}")
        if self.p is not None and not self.p > 0:
            raise ArgumentError(f"extreme level p must be positive, got {self.p}")
        if not 0.0 < self.tau_star < 1.0:
            raise ArgumentError(f"tau_star must lie in (0, 1), got {self.tau_star}")
        if not self.c_ic > 0:
            raise ArgumentError(f"c_ic must be positive, got {self.c_ic}")
        if int(self.r_max) != self.r_max or self.r_max < 1:
            raise ArgumentError(f"r_max must be a positive integer, got {self.r_max}")
        object.__setattr__(self, "r_max", int(self.r_max))

    def validate_for(self, n_cells: int, require_p: bool = False) -> None:
        """Check the panel-size dependent constraints against N*T cells."""
        if not 1 <= self.k < n_cells:
            raise ArgumentError(f"k={self.k} must satisfy 1 <= k < N*T={n_cells}")
        if require_p and self.p is None:
            raise ArgumentError("extreme level p is required but not set")
        if self.p is not None and not self.p < self.k / n_cells:
            raise ArgumentError(
                f"extreme level p={self.p} must be below k/(N*T)={self.k / n_cells}"
            )

    def intermediate_tau(self, n_cells: int) -> float:
        return self.k / n_cells


def _as_text(source) -> io.TextIOBase:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    if hasattr(source, "read"):
        data = source.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
        return io.StringIO(data)
    raise ArgumentError(f"unsupported panel source of type {type(source)!r}")


def _parse_cell(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise DataError(f"cannot parse value {text!r} at {where}") from exc
    if not math.isfinite(value):
        raise NonFiniteValueError(f"non-finite value {text!r} at {where}")
    return value


def _load_wide_csv(text: io.TextIOBase) -> PanelData:
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty wide-csv panel") from None
    if not header or header[0].strip() != "unit":
        raise DataError('wide-csv header must start with the literal cell "unit"')
    times = [h.strip() for h in header[1:]]
    units, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(times) + 1:
            raise DataError(f"row {lineno} has {len(row)} cells, expected {len(times) + 1}")
        units.append(row[0].strip())
        rows.append(
            [_parse_cell(v, f"row {lineno}, time {times[j]}") for j, v in enumerate(row[1:])]
        )
    if not rows:
        raise DataError("wide-csv panel has no data rows")
    return PanelData(np.array(rows), tuple(units), tuple(times))


def _load_long_csv(text: io.TextIOBase) -> PanelData:
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty long-csv panel") from None
    if header != ["unit", "time", "value"]:
        raise DataError('long-csv header must be exactly "unit,time,value"')
    cells: dict[tuple[str, str], float] = {}
    units: list[str] = []
    times: list[str] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise DataError(f"row {lineno} has {len(row)} cells, expected 3")
        unit, time, raw = row[0].strip(), row[1].strip(), row[2]
        key = (unit, time)
        if key in cells:
            raise DuplicateCellError(f"duplicate cell for unit {unit!r}, time {time!r}")
        cells[key] = _parse_cell(raw, f"row {lineno} (unit {unit!r}, time {time!r})")
        if unit not in units:
            units.append(unit)
        if time not in times:
            times.append(time)
    # canonical sorted axes make the result independent of row order
    units = sorted(units)
    times = sorted(times)
    missing = [(u, t) for u in units for t in times if (u, t) not in cells]
    if missing:
        u, t = missing[0]
        raise IncompleteGridError(
            f"incomplete grid: missing value for unit {u!r}, time {t!r}"
            + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else "")
        )
    values = np.array([[cells[(u, t)] for t in times] for u in units])
    return PanelData(values, tuple(units), tuple(times))


def _load_json_panel(text: io.TextIOBase) -> PanelData:
    try:
        doc = json.load(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON panel: {exc}") from exc
    for key in ("units", "times", "values"):
        if key not in doc:
            raise DataError(f'JSON panel is missing the "{key}" field')
    values = np.asarray(doc["values"], dtype=float)
    return PanelData(values, tuple(doc["units"]), tuple(doc["times"]))


def load_panel(source, format: str = "wide-csv") -> PanelData:
    """Read a panel from a byte stream, text stream, or string.

    Formats: ``wide-csv`` (header row = time labels, first column = unit
    labels, first header cell literally "unit"), ``long-csv`` (columns
    unit,time,value covering a complete N x T grid in any row order), and
    ``json`` (object with "units", "times" and a row-major "values" array).
    """
    if format not in PANEL_FORMATS:
        raise ArgumentError(f"unknown panel format {format!r}; choose from {PANEL_FORMATS}")
    text = _as_text(source)
    if format == "wide-csv":
        return _load_wide_csv(text)
    if format == "long-csv":
        return _load_long_csv(text)
    return _load_json_panel(text)


def save_panel(panel: PanelData, sink, format: str = "wide-csv") -> None:
    """Write a panel in any of the formats accepted by :func:`load_panel`."""
    if format not in PANEL_FORMATS:
        raise ArgumentError(f"unknown panel format {format!r}; choose from {PANEL_FORMATS}")
    out = io.StringIO()
    if format == "wide-csv":
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["unit", *panel.time_labels])
        for i, unit in enumerate(panel.unit_labels):
            writer.writerow([unit, *[repr(float(v)) for v in panel.values[i]]])
    elif format == "long-csv":
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["unit", "time", "value"])
        for i, unit in enumerate(panel.unit_labels):
            for j, time in enumerate(panel.time_labels):
                writer.writerow([unit, time, repr(float(panel.values[i, j]))])
    else:
        json.dump(
            {
                "units": list(panel.unit_labels),
                "times": list(panel.time_labels),
                "values": [list(row) for row in panel.values.tolist()],
            },
            out,
        )
        out.write("\n")
    _write_text(sink, out.getvalue())


def _write_text(sink, payload: str) -> None:
    try:
        if hasattr(sink, "write"):
            data = payload.encode("utf-8")
            try:
                sink.write(data)
            except TypeError:
                sink.write(payload)
        else:
            with open(sink, "w", encoding="utf-8") as handle:
                handle.write(payload)
    except (OSError, ValueError) as exc:
        raise OSError(f"failed to write output: {exc}") from exc


def save_result(result, sink) -> None:
    """Serialize a fit or EoT result as a single JSON document.

    Matrices are written row-major; floats use Python's shortest round-trip
    representation (15-17 significant digits), so reloading reproduces them
    bit-exactly.  Key order is fixed by construction.
    """
    doc = result.to_json_dict()
    doc = {"schema_version": RESULT_SCHEMA_VERSION, **doc}
    _write_text(sink, json.dumps(doc) + "\n")


def load_result(source):
    """Inverse of :func:`save_result`; returns a FitResult or EoTResult."""
    from .eot import EoTResult
    from .ftvm import FitResult

    text = _as_text(source)
    try:
        doc = json.load(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON result: {exc}") from exc
    version = doc.get("schema_version")
    if version != RESULT_SCHEMA_VERSION:
        raise DataError(f"unsupported result schema_version {version!r}")
    kind = doc.get("kind")
    if kind == "fit_result":
        return FitResult.from_json_dict(doc)
    if kind == "eot_result":
        return EoTResult.from_json_dict(doc)
    raise DataError(f"unknown result kind {kind!r}")
