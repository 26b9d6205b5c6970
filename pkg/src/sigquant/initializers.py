"""Initialization of quantizer parameters from the values they will quantize."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import QuantLevels, QuantParams
from .exceptions import CalibrationError, ConfigurationError, DegenerateInputError, InitializationError

__all__ = [
    "InitReport",
    "ZERO_BAND",
    "apply_zero_band",
    "calibrate_activation_range",
    "init_biases_kmeans",
    "init_biases_linear",
    "init_scales",
    "initialize_quantizer",
    "kmeans_1d",
    "wcss",
]

ZERO_BAND = 0.05


@dataclass
class InitReport:
    p: float
    q: float
    beta0: float
    alpha0: float
    bias_init: list
    method: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InitReport":
        return cls(**d)


def init_scales(levels: QuantLevels, inputs) -> tuple[float, float]:
    """Return ``(beta0, alpha0)`` mapping the inputs onto ±5p/4 in the scaled domain."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.size == 0:
        raise CalibrationError("cannot initialize scales from an empty input")
    q = float(np.max(np.abs(inputs)))
    if not q > 0:
        raise CalibrationError("all calibration inputs are zero; the input scale is undefined")
    p = float(levels.max_abs)
    beta0 = (5.0 * p / 4.0) / q
    return beta0, 1.0 / beta0


def wcss(values, centers) -> float:
    """Within-cluster sum of squares when each value goes to its nearest center."""
    values = np.asarray(values, dtype=np.float64)
    centers = np.sort(np.asarray(centers, dtype=np.float64))
    return float(np.sum(np.min((values[:, None] - centers[None, :]) ** 2, axis=1)))


def _optimal_weighted(points, weights, k):
    """Exact k-clustering of weighted sorted 1-D points by dynamic programming."""
    m = points.size
    cw = np.concatenate([[0.0], np.cumsum(weights)])
    cx = np.concatenate([[0.0], np.cumsum(weights * points)])
    cxx = np.concatenate([[0.0], np.cumsum(weights * points * points)])
    # cost[i, j]: weighted SSE of points[i:j]
    i = np.arange(m + 1)[:, None]
    j = np.arange(m + 1)[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        w = cw[j] - cw[i]
        sx = cx[j] - cx[i]
        cost = (cxx[j] - cxx[i]) - np.where(w > 0, sx * sx / w, 0.0)
    cost = np.where(j > i, np.maximum(cost, 0.0), np.inf)
    best = cost[0].copy()
    arg = np.zeros((k, m + 1), dtype=np.int64)
    for c in range(1, k):
        total = best[:, None] + cost
        arg[c] = np.argmin(total, axis=0)
        best = total[arg[c], np.arange(m + 1)]
    cuts = [m]
    for c in range(k - 1, 0, -1):
        cuts.append(int(arg[c, cuts[-1]]))
    cuts.append(0)
    cuts.reverse()
    return np.array(
        [(cx[b] - cx[a]) / (cw[b] - cw[a]) for a, b in zip(cuts, cuts[1:])], dtype=np.float64
    )


def _compress(values, max_points):
    uniq, counts = np.unique(values, return_counts=True)
    if uniq.size <= max_points:
        return uniq, counts.astype(np.float64)
    # Equal-mass bins over the sorted data, each summarized by its mean.
    order = np.sort(values)
    edges = np.linspace(0, order.size, max_points + 1).round().astype(np.int64)
    edges = np.unique(edges)
    sums = np.add.reduceat(order, edges[:-1])
    counts = np.diff(edges).astype(np.float64)
    return sums / counts, counts


def _lloyd(values, centers, max_iter):
    for _ in range(max_iter):
        labels = np.searchsorted((centers[1:] + centers[:-1]) / 2, values, side="right")
        sizes = np.bincount(labels, minlength=centers.size)
        sums = np.bincount(labels, weights=values, minlength=centers.size)
        new = centers.copy()
        filled = sizes > 0
        new[filled] = sums[filled] / sizes[filled]
        for empty in np.flatnonzero(~filled):
            big = int(np.argmax(sizes))
            members = values[labels == big]
            new[empty] = members[np.argmax(np.abs(members - new[big]))]
        new = np.sort(new)
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def kmeans_1d(values, k: int, seed: int = 0, *, max_iter: int = 100, max_points: int = 1024,
              seeding: str = "optimal") -> np.ndarray:
    """Sorted cluster centers of a 1-D sample.

    The default seeding is an exact dynamic-programming clustering (over at most
    ``max_points`` equal-mass bins for large samples), refined by Lloyd
    iterations on the full data. ``seeding="quantile"`` starts Lloyd from the
    ``(j + 1/2) / k`` quantiles instead, which is cheaper but can stall in a
    local optimum. ``seed`` is accepted for API symmetry; both seedings are
    deterministic.
    """
    values = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    if np.unique(values).size < k:
        raise DegenerateInputError(
            f"{np.unique(values).size} distinct values cannot form {k} clusters"
        )
    if seeding == "optimal":
        pts, wts = _compress(values, max_points)
        centers = _optimal_weighted(pts, wts, k)
    elif seeding == "quantile":
        centers = np.quantile(values, (np.arange(k) + 0.5) / k)
    else:
        raise ConfigurationError(f"unknown seeding {seeding!r}")
    return _lloyd(values, np.sort(centers), max_iter)


def init_biases_kmeans(inputs, levels: QuantLevels, seed: int = 0, beta: float = 1.0, *,
                       zero_band: bool = True) -> list[float]:
    """Interval boundaries at midpoints of ``n + 1`` k-means centers, scaled by ``beta``."""
    centers = kmeans_1d(inputs, levels.n + 1, seed)
    biases = (beta * (centers[:-1] + centers[1:]) / 2).tolist()
    if zero_band and _has_interior_zero(levels):
        biases = apply_zero_band(biases, levels)
    return biases


def _has_interior_zero(levels: QuantLevels) -> bool:
    z = levels.zero_index
    return z is not None and 0 < z < levels.n


def apply_zero_band(biases, levels: QuantLevels, band: float = ZERO_BAND) -> list[float]:
    """Pin the two boundaries around the zero level to ``-band`` and ``+band``."""
    z = levels.zero_index
    if z is None:
        raise ConfigurationError(f"level set {levels} does not contain zero")
    if not 0 < z < levels.n:
        raise ConfigurationError(f"zero is not an interior level of {levels}")
    biases = [float(b) for b in biases]
    if len(biases) != levels.n:
        raise ConfigurationError(f"expected {levels.n} biases, got {len(biases)}")
    biases[z - 1] = -band
    biases[z] = band
    if any(b <= a for a, b in zip(biases, biases[1:])):
        raise InitializationError(
            f"zero band ±{band} breaks bias ordering: {biases}; widen the neighbouring biases"
        )
    return biases


def init_biases_linear(levels: QuantLevels, range_) -> list[float]:
    """``n`` evenly spaced interior boundaries of ``range_``."""
    lo, hi = map(float, range_)
    if not hi > lo:
        raise ConfigurationError(f"linear bias range must have positive width, got [{lo}, {hi}]")
    k = np.arange(1, levels.n + 1)
    return (lo + (hi - lo) * k / (levels.n + 1)).tolist()


def initialize_quantizer(
    levels: QuantLevels,
    inputs,
    *,
    kind: str = "weight",
    method: str = "kmeans",
    seed: int = 0,
) -> tuple[QuantParams, InitReport]:
    """Scales plus bias placement for a weight or activation quantizer.

    Binary weight sets use a single zero boundary and ternary weight sets the
    fixed ±0.05 band; everything else clusters the inputs (``method="kmeans"``)
    or spaces boundaries uniformly over the scaled input range
    (``method="linear"``).
    """
    inputs = np.asarray(inputs, dtype=np.float64).reshape(-1)
    beta0, alpha0 = init_scales(levels, inputs)
    q = float(np.max(np.abs(inputs)))
    if kind == "weight" and levels.levels == (-1, 1):
        biases, used = [0.0], "binary"
    elif kind == "weight" and levels.levels == (-1, 0, 1):
        biases, used = [-ZERO_BAND, ZERO_BAND], "ternary"
    elif method == "kmeans":
        biases = init_biases_kmeans(inputs, levels, seed, beta0, zero_band=kind == "weight")
        used = "kmeans"
    elif method == "linear":
        biases = init_biases_linear(levels, (beta0 * inputs.min(), beta0 * inputs.max()))
        if kind == "weight" and _has_interior_zero(levels):
            biases = apply_zero_band(biases, levels)
        used = "linear"
    else:
        raise ConfigurationError(f"unknown bias initialization {method!r}")
    params = QuantParams(alpha=alpha0, beta=beta0, biases=biases)
    report = InitReport(p=float(levels.max_abs), q=q, beta0=beta0, alpha0=alpha0,
                        bias_init=list(map(float, biases)), method=used)
    return params, report


def calibrate_activation_range(network, sample_batch, layer_index: int) -> float:
    """Largest output of ``network.layers[layer_index]`` in a float forward pass."""
    out = network.activations(sample_batch, upto=layer_index)
    q = float(np.max(out)) if out.size else 0.0
    if not q > 0:
        raise CalibrationError(
            f"layer {layer_index} ({network.layers[layer_index].name}) never activates on the calibration batch"
        )
    return q
