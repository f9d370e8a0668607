"""Forecast evaluation and the qualitative sweeps.

NMSE scores point forecasts; the two sweeps rerun evaluation across
input context lengths and input noise levels, joining forecast error
with the isotropy diagnostics of the final layer's contextual
embeddings.  Every row is a pure function of (model, dataset, sweep
value, seed), so tables reproduce bit-for-bit.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UndefinedMetricError
from .isotropy import (
    adjusted_inter_token_cos,
    effective_dimension,
    select_cluster_count,
)
from .kernels import add_noise
from .model import dump_embeddings, forecast
from .numerics import RngStream
from .theory import isotropy_partition
from .tokenizer import fit_scale, tokenize

SWEEP_CSV_HEADER = "sweep_var,value,dataset,seed,nmse,zeta_prime,d08,iso_I"


def nmse(pred, truth):
    """Normalized mean squared error: sum((p - t)^2) / sum(t^2)."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise InvalidArgumentError("pred and truth must be equal-length, non-empty")
    denom = float(np.sum(t * t))
    if denom == 0.0:
        raise UndefinedMetricError("NMSE undefined for all-zero truth")
    return float(np.sum((p - t) ** 2)) / denom


def naive_baseline(context, horizon):
    """Repeat the last context value over the forecast region."""
    ctx = np.asarray(context, dtype=np.float64)
    if ctx.size == 0:
        raise InvalidArgumentError("context must be non-empty")
    return np.full(horizon, ctx[-1])


@dataclass(frozen=True)
class SweepRow:
    variable: str
    value: float
    dataset: str
    seed: int
    nmse: float
    zeta_prime: float
    d08: int
    iso_i: float

    def __post_init__(self):
        if self.nmse < 0:
            raise InvalidArgumentError("NMSE cannot be negative")


@dataclass
class SweepConfig:
    """One qualitative sweep: a variable, its values, datasets, seeds."""

    variable: str  # "context_length" or "noise_sigma"
    values: tuple
    seeds: tuple = tuple(range(20))
    horizon: int = 4
    windows: int = 32
    sample_count: int = 20
    context_length: int = 16  # fixed context for noise sweeps
    pair_budget: int = 10000
    k_max: int = 10

    def __post_init__(self):
        if self.variable not in ("context_length", "noise_sigma"):
            raise InvalidArgumentError(f"unknown sweep variable {self.variable!r}")
        if len(self.values) < 2:
            raise InvalidArgumentError("a sweep needs at least 2 values")
        low = 2 if self.variable == "context_length" else 0
        if any(v < low for v in self.values):
            raise InvalidArgumentError(f"sweep values must be >= {low}")


def _row_stream(variable, value, dataset, seed):
    """Stream keyed by the row's identity, not its enumeration order."""
    tag = f"{variable}|{value!r}|{dataset}".encode()
    stream_id = int.from_bytes(hashlib.sha256(tag).digest()[:8], "little")
    return RngStream(seed, stream_id)


def evaluate_point(
    params,
    tok_cfg,
    series_values,
    *,
    context_length,
    noise_sigma,
    horizon,
    windows,
    sample_count,
    stream,
    window_stream=None,
    anchor_floor=None,
    pair_budget=10000,
    k_max=10,
):
    """Forecast error plus isotropy metrics for one sweep point.

    Noise (if any) corrupts the evaluation series once, before windows
    are cut and tokenized; forecasts are always scored against the clean
    series.  Evaluation windows are anchored at the start of the
    forecast region and drawn from ``window_stream`` when given, so
    paired sweep values forecast the same targets (common random
    numbers); ``anchor_floor`` reserves room for the largest context
    length in the sweep.  Embeddings come from the final attention layer
    over the evaluation contexts.
    """
    if context_length < 2:
        raise InvalidArgumentError(f"context_length must be >= 2, got {context_length}")
    x = np.asarray(series_values, dtype=np.float64)
    noisy = add_noise(x, noise_sigma, stream)
    floor = context_length if anchor_floor is None else int(anchor_floor)
    n_anchors = x.size - horizon - floor + 1
    if n_anchors < 1:
        raise InvalidArgumentError(
            f"series of length {x.size} too short for context {floor} "
            f"+ horizon {horizon}"
        )
    n_windows = min(windows, n_anchors)
    picker = window_stream if window_stream is not None else stream
    anchors = floor + np.sort(
        picker.generator.choice(n_anchors, size=n_windows, replace=False)
    )
    preds, truths, token_windows = [], [], []
    for anchor in anchors:
        ctx = noisy[anchor - context_length : anchor]
        scale = fit_scale(ctx)
        toks = tokenize(ctx, tok_cfg, scale)
        truth = x[anchor : anchor + horizon]
        _, point = forecast(
            params, toks, horizon, sample_count, stream=stream, tok_cfg=tok_cfg, scale=scale
        )
        preds.append(point)
        truths.append(truth)
        token_windows.append(toks.tokens)
    error = nmse(np.concatenate(preds), np.concatenate(truths))
    dump = dump_embeddings(params, token_windows, layer_ids=[params.layer_count])
    matrix = dump.layer_matrix(params.layer_count)
    k_range = range(2, min(k_max, matrix.shape[0] - 1) + 1)
    selection = select_cluster_count(matrix, k_range, stream)
    adjusted = adjusted_inter_token_cos(
        dump, params.layer_count, selection.clustering, pair_budget, stream
    )
    d08 = effective_dimension(matrix, 0.8)
    iso = isotropy_partition(matrix)
    return error, adjusted.value, d08.value, iso.value


def _sweep_row_task(task):
    """One sweep row; top-level so a process pool can run it."""
    params, tok_cfg, series, variable, value, name, seed, common, extra = task
    stream = _row_stream(variable, value, name, seed)
    # window starts are shared across the sweep values of a
    # (dataset, seed) pair for a paired comparison
    window_stream = _row_stream(variable, "windows", name, seed)
    error, zeta_prime, d08, iso_i = evaluate_point(
        params,
        tok_cfg,
        series,
        stream=stream,
        window_stream=window_stream,
        **common,
        **extra,
    )
    return SweepRow(
        variable=variable,
        value=float(value),
        dataset=name,
        seed=int(seed),
        nmse=error,
        zeta_prime=zeta_prime,
        d08=d08,
        iso_i=iso_i,
    )


def _run_sweep(params, tok_cfg, datasets, cfg, value_to_kwargs, workers=1):
    common = {
        "horizon": cfg.horizon,
        "windows": cfg.windows,
        "sample_count": cfg.sample_count,
        "pair_budget": cfg.pair_budget,
        "k_max": cfg.k_max,
    }
    tasks = [
        (params, tok_cfg, series, cfg.variable, value, name, seed, common, value_to_kwargs(value))
        for value in cfg.values
        for name, series in datasets.items()
        for seed in cfg.seeds
    ]
    if workers > 1 and len(tasks) > 1:
        # rows are keyed by (variable, value, dataset, seed), so the pool
        # cannot change any result, only the wall time
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_row_task, tasks))
    return [_sweep_row_task(task) for task in tasks]


def context_length_sweep(params, tok_cfg, datasets, cfg, workers=1):
    """Evaluate across input context lengths (clean inputs)."""
    if cfg.variable != "context_length":
        raise InvalidArgumentError("config variable must be context_length")
    floor = int(max(cfg.values))
    return _run_sweep(
        params,
        tok_cfg,
        datasets,
        cfg,
        lambda v: {
            "context_length": int(v),
            "noise_sigma": 0.0,
            "anchor_floor": floor,
        },
        workers,
    )


def noise_sweep(params, tok_cfg, datasets, cfg, workers=1):
    """Evaluate across noise levels at a fixed context length.

    Each row evaluates a noisy copy of the dataset (one noise draw per
    row, applied to the whole series); targets stay clean."""
    if cfg.variable != "noise_sigma":
        raise InvalidArgumentError("config variable must be noise_sigma")
    return _run_sweep(
        params,
        tok_cfg,
        datasets,
        cfg,
        lambda v: {"context_length": cfg.context_length, "noise_sigma": float(v)},
        workers,
    )


def _pair_up(rows):
    """Group a two-value sweep into {(dataset, seed): {value: row}}."""
    grouped = {}
    for row in rows:
        grouped.setdefault((row.dataset, row.seed), {})[row.value] = row
    return grouped


def sweep_verdicts(rows):
    """Directional summary for a two-value sweep.

    For noise: fractions of (dataset, seed) pairs where the higher sigma
    has larger |zeta'| and larger NMSE.  For context length: fraction
    where the length with larger |zeta'| also has the larger NMSE.
    """
    if not rows:
        raise InvalidArgumentError("no sweep rows")
    variable = rows[0].variable
    values = sorted({row.value for row in rows})
    if len(values) != 2:
        raise InvalidArgumentError("verdicts need exactly 2 sweep values")
    lo, hi = values
    grouped = _pair_up(rows)
    pairs = [g for g in grouped.values() if len(g) == 2]
    n = len(pairs)
    if n == 0:
        raise InvalidArgumentError("no complete (dataset, seed) pairs")
    if variable == "noise_sigma":
        aniso_up = sum(abs(g[hi].zeta_prime) > abs(g[lo].zeta_prime) for g in pairs)
        nmse_up = sum(g[hi].nmse > g[lo].nmse for g in pairs)
        return {
            "variable": variable,
            "values": [lo, hi],
            "pairs": n,
            "anisotropy_increase_fraction": aniso_up / n,
            "nmse_increase_fraction": nmse_up / n,
            "anisotropy_increase_pass": aniso_up / n >= 0.6,
            "nmse_increase_pass": nmse_up / n >= 0.8,
        }
    coupled = sum(
        (abs(g[hi].zeta_prime) - abs(g[lo].zeta_prime)) * (g[hi].nmse - g[lo].nmse) > 0
        for g in pairs
    )
    return {
        "variable": variable,
        "values": [lo, hi],
        "pairs": n,
        "coupling_fraction": coupled / n,
        "coupling_pass": coupled / n >= 0.6,
    }


def sweep_rows_to_csv(rows):
    """Render rows under the fixed sweep CSV header."""
    lines = [SWEEP_CSV_HEADER]
    for row in rows:
        lines.append(
            f"{row.variable},{row.value!r},{row.dataset},{row.seed},"
            f"{row.nmse!r},{row.zeta_prime!r},{row.d08},{row.iso_i!r}"
        )
    return "\n".join(lines) + "\n"
