"""The quantization operator.

A quantizer maps a real input ``x`` onto ``alpha * y`` where ``y`` is a member
of an integer level set. The ideal (inference) form is a sum of unit steps,

    alpha * (sum_i s_i * step(beta * x - b_i) - o),

and the soft (training) form replaces every step with a sigmoid of
steepness ``T``. Both forms and the analytic gradients of the soft form live
here as pure functions of their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, DiagnosticError, NumericError

__all__ = [
    "PRESETS",
    "QuantGrads",
    "QuantLevels",
    "QuantParams",
    "ideal_quantize",
    "quantize_codes",
    "relaxation_gap",
    "sigmoid",
    "soft_quantize",
    "soft_quantize_backward",
    "unit_step",
]


@dataclass(frozen=True)
class QuantLevels:
    """An ordered integer level set and the step-sum constants it implies.

    ``offset`` is the value subtracted after summing the steps so that the
    all-off state lands on ``levels[0]``. For zero-centred sets this equals
    half the sum of the step scales; for sets starting at zero it is zero.
    """

    levels: tuple[int, ...]
    name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        lv = tuple(int(v) for v in self.levels)
        if any(float(a) != float(b) for a, b in zip(lv, self.levels)):
            raise ConfigurationError(f"levels must be integers, got {self.levels!r}")
        if len(lv) < 2:
            raise ConfigurationError("a level set needs at least two levels")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigurationError(f"levels must be strictly increasing, got {lv}")
        object.__setattr__(self, "levels", lv)

    @property
    def n(self) -> int:
        return len(self.levels) - 1

    @property
    def step_scales(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in zip(self.levels, self.levels[1:]))

    @property
    def offset(self) -> float:
        return float(-self.levels[0])

    @property
    def max_abs(self) -> int:
        return max(abs(self.levels[0]), abs(self.levels[-1]))

    @property
    def is_symmetric(self) -> bool:
        return self.levels == tuple(-v for v in reversed(self.levels))

    @property
    def zero_index(self) -> int | None:
        return self.levels.index(0) if 0 in self.levels else None

    @classmethod
    def from_spec(cls, spec: "str | Sequence[int] | QuantLevels") -> "QuantLevels":
        """Build from a preset name, a ``{a,b,c}``/``a,b,c`` string or a sequence."""
        if isinstance(spec, QuantLevels):
            return spec
        if isinstance(spec, str):
            key = spec.strip()
            canon = _PRESET_ALIASES.get(key.lower(), key)
            if canon in PRESETS:
                return PRESETS[canon]
            body = key.strip("{}[]() ")
            try:
                values = [int(tok) for tok in body.replace(";", ",").split(",") if tok.strip()]
            except ValueError:
                raise ConfigurationError(f"unknown level preset {spec!r}") from None
            return cls(tuple(values))
        return cls(tuple(spec))

    def __str__(self):
        return self.name or "{" + ",".join(map(str, self.levels)) + "}"


PRESETS: dict[str, QuantLevels] = {
    "binary": QuantLevels((-1, 1), "binary"),
    "ternary": QuantLevels((-1, 0, 1), "ternary"),
    "3bit±2": QuantLevels((-2, -1, 0, 1, 2), "3bit±2"),
    "3bit±4": QuantLevels((-4, -2, -1, 0, 1, 2, 4), "3bit±4"),
    "5bit": QuantLevels(tuple(range(-15, 16)), "5bit"),
    "act1bit": QuantLevels((0, 1), "act1bit"),
    "act2bit": QuantLevels((0, 1, 2, 3), "act2bit"),
}

_PRESET_ALIASES = {
    "3bit+-2": "3bit±2",
    "3bit_pm2": "3bit±2",
    "3bitpm2": "3bit±2",
    "3bit+-4": "3bit±4",
    "3bit_pm4": "3bit±4",
    "3bitpm4": "3bit±4",
    "3bit±2": "3bit±2",
    "3bit±4": "3bit±4",
}


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Operator state of one quantizer: scales, interval biases, temperature."""

    alpha: float
    beta: float
    biases: np.ndarray
    temperature: float = 1.0
    alpha_learnable: bool = True
    beta_learnable: bool = True
    biases_learnable: bool = False

    def __post_init__(self):
        b = np.array(self.biases, dtype=np.float64).reshape(-1)
        b.setflags(write=False)
        object.__setattr__(self, "biases", b)
        for name in ("alpha", "beta", "temperature"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v <= 0:
                raise ConfigurationError(f"{name} must be positive and finite, got {v}")
            object.__setattr__(self, name, v)
        if not np.all(np.isfinite(b)):
            raise ConfigurationError("biases must be finite")
        if b.size > 1 and np.any(np.diff(b) <= 0):
            raise ConfigurationError(f"biases must be strictly increasing, got {b.tolist()}")

    def replace(self, **changes) -> "QuantParams":
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and self.beta == other.beta
            and self.temperature == other.temperature
            and np.array_equal(self.biases, other.biases)
            and (self.alpha_learnable, self.beta_learnable, self.biases_learnable)
            == (other.alpha_learnable, other.beta_learnable, other.biases_learnable)
        )

    def __repr__(self):
        return (
            f"QuantParams(alpha={self.alpha!r}, beta={self.beta!r}, "
            f"biases={self.biases.tolist()!r}, temperature={self.temperature!r})"
        )


@dataclass
class QuantGrads:
    d_input: np.ndarray
    d_alpha: float
    d_beta: float
    d_biases: np.ndarray


def unit_step(z):
    """Heaviside step with the ``step(0) = 1`` convention."""
    return (np.asarray(z) >= 0).astype(np.float64)


def sigmoid(z):
    """Logistic sigmoid evaluated without overflow for any finite ``z``."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_pair(z):
    # sigma(z) and sigma(z) * (1 - sigma(z)); the product is formed as
    # sigma(z) * sigma(-z) to avoid cancellation in 1 - sigma(z).
    e = np.exp(-np.abs(z))
    d = 1.0 + e
    big = 1.0 / d
    small = e / d
    pos = z >= 0
    return np.where(pos, big, small), big * small


def _check(x, levels: QuantLevels, params: QuantParams):
    if params.biases.shape != (levels.n,):
        raise ConfigurationError(
            f"quantizer has {params.biases.size} biases but level set {levels} needs {levels.n}"
        )
    x = np.asarray(x, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"non-finite input at index {idx}: {x[idx]}")
    return x


def quantize_codes(x, levels: QuantLevels, params: QuantParams) -> np.ndarray:
    """Integer level reached by each element under the ideal step-sum.

    Returned as float64 so downstream matmuls accumulate exactly.
    """
    x = _check(x, levels, params)
    # Counting crossed biases is the step-sum with integer steps.
    k = np.searchsorted(params.biases, params.beta * x, side="right")
    return np.asarray(levels.levels, dtype=np.float64)[k]


def ideal_quantize(x, levels: QuantLevels, params: QuantParams) -> np.ndarray:
    return params.alpha * quantize_codes(x, levels, params)


def _soft_terms(x, levels, params):
    z = params.temperature * (params.beta * x[..., None] - params.biases)
    sig, dsig = _sigmoid_pair(z)
    s = np.asarray(levels.step_scales, dtype=np.float64)
    return s, sig, dsig


def soft_quantize(x, levels: QuantLevels, params: QuantParams) -> np.ndarray:
    """Temperature-scaled sigmoid-sum quantizer, elementwise over ``x``."""
    x = _check(x, levels, params)
    s, sig, _ = _soft_terms(x, levels, params)
    return params.alpha * (sig @ s - levels.offset)


def soft_quantize_backward(x, upstream, levels: QuantLevels, params: QuantParams) -> QuantGrads:
    """Gradients of ``sum(upstream * soft_quantize(x))`` w.r.t. x, alpha, beta and biases."""
    x = _check(x, levels, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ContractError(f"upstream shape {upstream.shape} does not match input shape {x.shape}")
    s, sig, dsig = _soft_terms(x, levels, params)
    a, t = params.alpha, params.temperature
    unscaled = sig @ s - levels.offset
    slope = dsig @ s
    d_input = upstream * (a * t * params.beta) * slope
    d_alpha = float(np.sum(upstream * unscaled))
    d_beta = float(a * t * np.sum(upstream * x * slope))
    per_bias = (upstream[..., None] * dsig).reshape(-1, levels.n).sum(axis=0)
    d_biases = -a * t * s * per_bias
    return QuantGrads(d_input=d_input, d_alpha=d_alpha, d_beta=d_beta, d_biases=d_biases)


def relaxation_gap(
    levels: QuantLevels,
    params: QuantParams,
    domain: tuple[float, float] = (-5.0, 5.0),
    grid_points: int = 10_000,
    exclusion_radius: float = 0.05,
) -> float:
    """Sup-norm distance between the soft and ideal quantizer on a grid.

    Grid points within ``exclusion_radius`` of any boundary ``b_i / beta`` are
    skipped, since the step is discontinuous there.
    """
    if grid_points < 2:
        raise DiagnosticError("grid_points must be at least 2")
    if exclusion_radius < 0:
        raise DiagnosticError("exclusion_radius must be non-negative")
    lo, hi = map(float, domain)
    grid = np.linspace(lo, hi, int(grid_points))
    edges = params.biases / params.beta
    dist = np.min(np.abs(grid[:, None] - edges[None, :]), axis=1) if edges.size else np.full_like(grid, np.inf)
    grid = grid[dist > exclusion_radius]
    if grid.size == 0:
        raise DiagnosticError("no grid points remain after excluding the bias neighbourhoods")
    gap = np.abs(soft_quantize(grid, levels, params) - ideal_quantize(grid, levels, params))
    return float(gap.max())
