import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Fixed chunk length for sample-wise reductions; results never depend on worker count
REDUCTION_CHUNK = 256


class AdvFeatError(Exception):
    """Base class for every error raised by the laboratory"""


class DatasetError(AdvFeatError, ValueError):
    pass


class FormatError(AdvFeatError):
    pass


class DimensionError(AdvFeatError, ValueError):
    pass


class ConfigError(AdvFeatError, ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class TrainingDivergedError(AdvFeatError, ArithmeticError):
    def __init__(self, epoch, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
        self.epoch = epoch


class LambdaSolveError(AdvFeatError):
    def __init__(self, reason, message):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


class DegenerateDirectionError(AdvFeatError, ValueError):
    pass


class ProbeError(AdvFeatError, ValueError):
    pass


class StageError(AdvFeatError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def resolve_threads(threads=None):
    """
    Pick the worker count for parallel sections

    Args:
        threads (int, optional): Explicit count; falls back to ADVFEAT_THREADS

    Returns:
        int: Number of workers, at least 1
    """
    if threads is None:
        threads = os.environ.get("ADVFEAT_THREADS", "1")
    try:
        threads = int(threads)
    except (TypeError, ValueError):
        raise ConfigError("threads", f"expected an integer, got {threads!r}")
    return max(1, threads)


def chunk_bounds(n, chunk=REDUCTION_CHUNK):
    return [(start, min(start + chunk, n)) for start in range(0, n, chunk)]


def tree_sum(parts):
    """
    Pairwise reduction in a fixed order

    Args:
        parts (list): Arrays of identical shape, in sample order

    Returns:
        numpy.ndarray: Their sum, bitwise independent of how parts were produced
    """
    if not parts:
        raise ValueError("tree_sum needs at least one part")
    level = list(parts)
    while len(level) > 1:
        paired = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


def chunked_reduce(fn, n, threads=1, chunk=REDUCTION_CHUNK):
    """Evaluate fn(start, stop) over fixed chunks of range(n) and tree-sum the results"""
    bounds = chunk_bounds(n, chunk)
    workers = resolve_threads(threads)
    if workers == 1 or len(bounds) == 1:
        parts = [fn(start, stop) for start, stop in bounds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: fn(*b), bounds))
    return tree_sum(parts)


def compensated_row_sum(rows, weights):
    """
    Neumaier-compensated weighted sum of matrix rows

    Args:
        rows (numpy.ndarray): N x d matrix
        weights (numpy.ndarray): length-N weights

    Returns:
        numpy.ndarray: sum_n weights[n] * rows[n]
    """
    rows = np.asarray(rows, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    total = np.zeros(rows.shape[1])
    compensation = np.zeros(rows.shape[1])
    for weight, row in zip(weights, rows):
        term = weight * row
        t = total + term
        big = np.abs(total) >= np.abs(term)
        compensation += np.where(big, (total - t) + term, (term - t) + total)
        total = t
    return total + compensation


def cosine_similarity(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        raise DegenerateDirectionError("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / denom)


def downsample_trace(epochs, values, max_points=10_000):
    """
    Thin a series to at most max_points entries, always keeping the last one

    Args:
        epochs (array-like): x coordinates
        values (array-like): y coordinates
        max_points (int): Upper bound on the returned length

    Returns:
        tuple: (epochs, values) as numpy arrays
    """
    epochs = np.asarray(epochs)
    values = np.asarray(values, dtype=np.float64)
    if len(epochs) <= max_points:
        return epochs, values
    idx = np.unique(np.linspace(0, len(epochs) - 1, max_points).round().astype(int))
    return epochs[idx], values[idx]


def records_to_frame(records, columns=None):
    """
    Build a DataFrame from row dictionaries with a stable column order

    Args:
        records (list): List of dicts
        columns (list, optional): Leading columns; others follow in first-seen order

    Returns:
        pandas.DataFrame: The table
    """
    frame = pd.DataFrame.from_records(list(records))
    if columns:
        for col in columns:
            if col not in frame.columns:
                frame[col] = pd.Series(dtype=object)
        rest = [c for c in frame.columns if c not in columns]
        frame = frame[list(columns) + rest]
    return frame
