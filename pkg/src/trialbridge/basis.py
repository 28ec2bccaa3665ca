"""Power-series sieve basis and design-weighted target moments."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .data import RweSample
from .exceptions import DegenerateColumn, DimensionMismatch


class Degree(str, enum.Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic_full"


def n_basis_terms(p: int, degree: Degree | str) -> int:
    """Number of basis columns: ``p`` or ``2p + p(p-1)/2``."""
    if Degree(degree) is Degree.LINEAR:
        return p
    return 2 * p + p * (p - 1) // 2


@dataclass(frozen=True)
class BasisSpec:
    """How to turn raw covariates into basis columns.

    ``center``/``scale`` of ``None`` means identity standardization. The
    basis never carries an intercept: the sum-to-one constraint on the
    calibration weights already fixes the constant.
    """

    degree: Degree = Degree.LINEAR
    center: Optional[tuple[float, ...]] = None
    scale: Optional[tuple[float, ...]] = None
    include_intercept: bool = False

    def __post_init__(self):
        object.__setattr__(self, "degree", Degree(self.degree))
        if self.include_intercept:
            raise ValueError("basis intercepts are not supported")
        if (self.center is None) != (self.scale is None):
            raise ValueError("center and scale must be given together")
        if self.center is not None:
            center = tuple(float(c) for c in self.center)
            scale = tuple(float(s) for s in self.scale)
            if len(center) != len(scale):
                raise DimensionMismatch("center and scale lengths differ")
            if any(not s > 0 for s in scale):
                raise ValueError("standardization scales must be positive")
            object.__setattr__(self, "center", center)
            object.__setattr__(self, "scale", scale)

    @property
    def standardized(self) -> bool:
        return self.center is not None

    def with_standardization(self, center, scale) -> "BasisSpec":
        return BasisSpec(self.degree, tuple(center), tuple(scale))

    def to_dict(self) -> dict:
        return {
            "degree": self.degree.value,
            "center": None if self.center is None else list(self.center),
            "scale": None if self.scale is None else list(self.scale),
        }


@dataclass(frozen=True)
class BasisMatrix:
    values: np.ndarray
    spec: BasisSpec
    names: tuple[str, ...]

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TargetMoments:
    g_tilde: np.ndarray
    total_design_weight: float


def basis_names(covariate_names: Sequence[str], degree: Degree | str) -> tuple[str, ...]:
    names = list(covariate_names)
    out = list(names)
    if Degree(degree) is Degree.QUADRATIC:
        out += [f"{a}:{b}" for a, b in combinations(names, 2)]
        out += [f"{a}^2" for a in names]
    return tuple(out)


def fit_standardization(x_rwe: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Design-weighted mean and standard deviation of each raw column."""
    x = np.asarray(x_rwe, dtype=float)
    d = np.asarray(d, dtype=float)
    if x.ndim != 2 or d.shape != (x.shape[0],):
        raise DimensionMismatch(f"x shape {x.shape} incompatible with d shape {d.shape}")
    if x.shape[0] < 2:
        raise DegenerateColumn("<all>: fewer than two rows")
    flat = np.ptp(x, axis=0) == 0
    if flat.any():
        raise DegenerateColumn(int(np.flatnonzero(flat)[0]))
    w = d / d.sum()
    center = w @ x
    scale = np.sqrt(w @ (x - center) ** 2)
    return center, scale


def build_basis(x: np.ndarray, spec: BasisSpec,
                covariate_names: Optional[Sequence[str]] = None) -> BasisMatrix:
    """Standardize raw covariates, then evaluate the monomials.

    Column order: main effects, pairwise interactions ``(i<j)`` in
    lexicographic order, then squares.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionMismatch(f"covariate matrix must be 2-D, got shape {x.shape}")
    p = x.shape[1]
    if covariate_names is None:
        covariate_names = [f"x{k + 1}" for k in range(p)]
    if len(covariate_names) != p:
        raise DimensionMismatch(f"{len(covariate_names)} names for {p} columns")
    if spec.standardized:
        if len(spec.center) != p:
            raise DimensionMismatch(
                f"standardization fitted on {len(spec.center)} columns, data has {p}"
            )
        z = (x - np.asarray(spec.center)) / np.asarray(spec.scale)
    else:
        z = x
    if spec.degree is Degree.LINEAR:
        values = z.copy()
    else:
        iu, ju = np.triu_indices(p, k=1)
        values = np.hstack([z, z[:, iu] * z[:, ju], z * z])
    return BasisMatrix(values, spec, basis_names(covariate_names, spec.degree))


def target_moments(rwe: RweSample, spec: BasisSpec,
                   covariate_names: Optional[Sequence[str]] = None) -> TargetMoments:
    """Self-normalized design-weighted mean of the basis over the RWE rows."""
    g = build_basis(rwe.x, spec, covariate_names).values
    total = float(rwe.d.sum())
    return TargetMoments((rwe.d @ g) / total, total)


def fitted_spec(rwe: RweSample, degree: Degree | str = Degree.LINEAR) -> BasisSpec:
    """A spec whose standardization is fitted on the design-weighted RWE sample."""
    center, scale = fit_standardization(rwe.x, rwe.d)
    return BasisSpec(Degree(degree), tuple(center), tuple(scale))
