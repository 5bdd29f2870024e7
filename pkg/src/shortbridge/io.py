"""Dataset loaders and output writers for the command line."""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .models.network import EdgeData


class DataIOError(OSError):
    """Missing or malformed input file."""


def _read_rows(path) -> list[list[str]]:
    if not os.path.isfile(path):
        raise DataIOError(f"data file not found: {path}")
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataIOError(f"{path} is empty")
    return rows


def _to_float(rows, path, offset=0) -> np.ndarray:
    try:
        return np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise DataIOError(f"{path}: non-numeric entry after line {offset}: {exc}") from exc


def _is_header(row) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return True
    return False


def load_logistic_csv(path):
    """CSV with a header row; column ``y`` is the 0/1 response, the others covariates.

    Returns ``X, y, names``.
    """
    rows = _read_rows(path)
    header = [h.strip() for h in rows[0]]
    if "y" not in header:
        raise DataIOError(f"{path}: header has no 'y' column")
    data = _to_float(rows[1:], path, 1)
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DataIOError(f"{path}: rows do not match the header width")
    iy = header.index("y")
    y = data[:, iy]
    if not np.all((y == 0) | (y == 1)):
        raise DataIOError(f"{path}: response must be 0/1")
    keep = [j for j in range(len(header)) if j != iy]
    return data[:, keep], y, [header[j] for j in keep]


def load_binary_matrix(path) -> np.ndarray:
    """Individuals by items 0/1 matrix; a non-numeric first row is taken as a header."""
    rows = _read_rows(path)
    if _is_header(rows[0]):
        rows = rows[1:]
    Y = _to_float(rows, path)
    if Y.ndim != 2 or Y.size == 0:
        raise DataIOError(f"{path}: expected a rectangular matrix")
    if not np.all((Y == 0) | (Y == 1)):
        raise DataIOError(f"{path}: entries must be 0/1")
    return Y


def load_dyads(path) -> EdgeData:
    """Dyad list ``i,j,y,x1..xp`` listing every unordered pair once.

    Node labels are arbitrary integers and are mapped to ``0..n-1`` in
    increasing order.
    """
    rows = _read_rows(path)
    if _is_header(rows[0]):
        rows = rows[1:]
    data = _to_float(rows, path)
    if data.ndim != 2 or data.shape[1] < 3:
        raise DataIOError(f"{path}: need at least the columns i, j, y")
    labels, codes = np.unique(data[:, :2], return_inverse=True)
    codes = codes.reshape(-1, 2)
    try:
        return EdgeData.from_dyads(codes[:, 0], codes[:, 1], data[:, 2], data[:, 3:], n=labels.size)
    except ValueError as exc:
        raise DataIOError(f"{path}: {exc}") from exc


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_json(path) -> dict:
    if not os.path.isfile(path):
        raise DataIOError(f"file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot parse {path}: {exc}") from exc


def write_sample_csv(path, names, values, weights) -> None:
    """Weighted sample, one particle per row, full double precision."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["weight", *names])
        for w, row in zip(weights, values):
            out.writerow([f"{w:.17g}", *(f"{v:.17g}" for v in row)])
