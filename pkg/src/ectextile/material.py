"""Elastic material laws for simulated textiles.

A law maps engineering strain to engineering stress with a continuous,
piecewise-linear curve through the origin.  Slopes are in Pa, strain is
dimensionless.
"""

from __future__ import annotations

import enum
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

SIGMA_MAX = 3.0e4  # Pa, stretch-test stop stress


class DomainError(ValueError):
    """Raised when a strain lies outside the domain of a law."""


class LawKind(str, enum.Enum):
    LINEAR = "Linear"
    PIECEWISE_LINEAR = "PiecewiseLinear"


@dataclass(frozen=True)
class MaterialLaw:
    kind: LawKind
    moduli: tuple[float, ...]
    knots: tuple[float, ...] = ()
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LawKind(self.kind))
        object.__setattr__(self, "moduli", tuple(float(m) for m in self.moduli))
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if len(self.moduli) < 1:
            raise ValueError("a material law needs at least one modulus")
        if len(self.knots) != len(self.moduli) - 1:
            raise ValueError(
                f"expected {len(self.moduli) - 1} knots for {len(self.moduli)} moduli, "
                f"got {len(self.knots)}")
        if not all(math.isfinite(m) and m > 0 for m in self.moduli):
            raise ValueError(f"moduli must be finite and positive: {self.moduli}")
        if any(not 0.0 < k < 1.0 for k in self.knots):
            raise ValueError(f"knots must lie in (0, 1): {self.knots}")
        if any(b <= a for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError(f"knots must be strictly increasing: {self.knots}")
        if self.kind is LawKind.LINEAR and len(self.moduli) != 1:
            raise ValueError("a Linear law has exactly one modulus")

    @classmethod
    def linear(cls, modulus: float, id: int = 0) -> MaterialLaw:
        return cls(LawKind.LINEAR, (modulus,), (), id)

    @classmethod
    def piecewise(cls, moduli: Sequence[float], knots: Sequence[float],
                  id: int = 0) -> MaterialLaw:
        return cls(LawKind.PIECEWISE_LINEAR, tuple(moduli), tuple(knots), id)

    @property
    def initial_modulus(self) -> float:
        return self.moduli[0]

    @property
    def knot_stresses(self) -> tuple[float, ...]:
        """Stress reached at each knot."""
        out, s, prev = [], 0.0, 0.0
        for m, k in zip(self.moduli, self.knots):
            s += m * (k - prev)
            out.append(s)
            prev = k
        return tuple(out)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value,
                "moduli": list(self.moduli), "knots": list(self.knots)}

    @classmethod
    def from_dict(cls, d: dict) -> MaterialLaw:
        unknown = set(d) - {"id", "kind", "moduli", "knots"}
        if unknown:
            raise ValueError(f"unknown material keys: {sorted(unknown)}")
        return cls(LawKind(d["kind"]), tuple(d["moduli"]), tuple(d.get("knots", ())),
                   int(d.get("id", 0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class SampleGeometry:
    rest_length: float = 0.18          # l0, m
    cross_section: float = 0.18e-3     # A0, m^2
    rows: int = 25
    cols: int = 25
    width: float | None = None         # m, defaults to rest_length

    def __post_init__(self):
        if not self.rest_length > 0:
            raise ValueError("rest_length must be positive")
        if not self.cross_section > 0:
            raise ValueError("cross_section must be positive")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("mesh needs at least 2x2 nodes")
        if self.width is not None and not self.width > 0:
            raise ValueError("width must be positive")

    @property
    def cloth_width(self) -> float:
        return self.rest_length if self.width is None else self.width

    @property
    def n_nodes(self) -> int:
        return self.rows * self.cols

    def to_dict(self) -> dict:
        return {"rest_length": self.rest_length, "cross_section": self.cross_section,
                "rows": self.rows, "cols": self.cols, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> SampleGeometry:
        return cls(**d)


def stress_at(law: MaterialLaw, strain: float) -> float:
    """Engineering stress (Pa) at a non-negative strain."""
    strain = float(strain)
    if not strain >= 0.0:
        raise DomainError(f"strain must be non-negative, got {strain}")
    stress, prev = 0.0, 0.0
    for m, k in zip(law.moduli, law.knots):
        if strain <= k:
            return stress + m * (strain - prev)
        stress += m * (k - prev)
        prev = k
    return stress + law.moduli[-1] * (strain - prev)


def stress_array(law: MaterialLaw, strain) -> np.ndarray:
    """Vectorised `stress_at`."""
    eps = np.asarray(strain, dtype=np.float64)
    if np.any(~(eps >= 0.0)):
        raise DomainError("strain must be non-negative")
    edges = np.concatenate(([0.0], law.knots, [np.inf]))
    out = np.zeros_like(eps)
    for m, lo, hi in zip(law.moduli, edges[:-1], edges[1:]):
        out += m * np.clip(eps - lo, 0.0, hi - lo)
    return out


def secant_modulus(law: MaterialLaw, strain: float) -> float:
    """sigma / epsilon at the given strain (Pa)."""
    strain = float(strain)
    if not strain > 0.0:
        raise DomainError(f"secant modulus needs strain > 0, got {strain}")
    return stress_at(law, strain) / strain


def strain_at(law: MaterialLaw, stress: float) -> float:
    """Inverse of `stress_at` (laws are strictly increasing)."""
    stress = float(stress)
    if not stress >= 0.0:
        raise DomainError(f"stress must be non-negative, got {stress}")
    prev_k, prev_s = 0.0, 0.0
    for m, k, s in zip(law.moduli, law.knots, law.knot_stresses):
        if stress <= s:
            return prev_k + (stress - prev_s) / m
        prev_k, prev_s = k, s
    return prev_k + (stress - prev_s) / law.moduli[-1]


def tangent_modulus(law: MaterialLaw, strain: float) -> float:
    """Slope of the segment containing `strain` (right-continuous)."""
    for m, k in zip(law.moduli, law.knots):
        if strain < k:
            return m
    return law.moduli[-1]


def max_slope_upto(law: MaterialLaw, strain: float) -> float:
    """Largest segment slope active on [0, strain]."""
    out = law.moduli[0]
    for m, k in zip(law.moduli[1:], law.knots):
        if strain > k:
            out = max(out, m)
    return out


def is_stiffening(law: MaterialLaw) -> bool:
    return all(b >= a for a, b in zip(law.moduli, law.moduli[1:]))


# Family sampling ranges.  Secant moduli at SIGMA_MAX are stratified
# log-uniformly over SECANT_RANGE so every law reaches SIGMA_MAX below 60%
# strain and a family of >= 22 laws spans at least a decade.
SECANT_RANGE = (5.0e4, 6.0e5)
SLOPE_RATIO_RANGE = (1.0, 5.0)
KNOT_STRESS_RANGE = (0.15, 0.85)  # fractions of SIGMA_MAX


def _stiffening_law(secant: float, ratios: Sequence[float], knot_fracs: Sequence[float],
                    sigma_max: float, id: int) -> MaterialLaw:
    # Choose the base slope so that sigma_max / secant strain is hit exactly.
    knot_s = [f * sigma_max for f in knot_fracs]
    rel = np.cumprod([1.0, *ratios])
    bounds = [0.0, *knot_s, sigma_max]
    compliance = sum((b - a) / r for a, b, r in zip(bounds[:-1], bounds[1:], rel))
    base = secant * compliance / sigma_max
    moduli = base * rel
    knots, eps, s_prev = [], 0.0, 0.0
    for m, s in zip(moduli, knot_s):
        eps += (s - s_prev) / m
        knots.append(eps)
        s_prev = s
    return MaterialLaw.piecewise(moduli.tolist(), knots, id=id)


def material_family(count: int, seed: int, *, nonlinear_fraction: float = 0.5,
                    segments: int = 3, sigma_max: float = SIGMA_MAX,
                    secant_range: tuple[float, float] = SECANT_RANGE) -> list[MaterialLaw]:
    """Deterministic family of `count` laws with ids ``0..count-1``.

    Laws are Linear or stiffening PiecewiseLinear with `segments` segments.
    `nonlinear_fraction=1.0` gives a purely nonlinear family, ``0.0`` a purely
    linear one.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if segments < 2:
        raise ValueError("piecewise laws need at least two segments")
    rng = np.random.default_rng(seed)
    n_nonlin = int(round(nonlinear_fraction * count))
    is_nonlin = np.zeros(count, dtype=bool)
    is_nonlin[:n_nonlin] = True
    is_nonlin = rng.permutation(is_nonlin)
    strata = rng.permutation(count)
    lo, hi = secant_range
    laws = []
    for i in range(count):
        u = (strata[i] + rng.uniform()) / count
        secant = lo * (hi / lo) ** u
        ratios = rng.uniform(*SLOPE_RATIO_RANGE, size=segments - 1)
        fracs = np.sort(rng.uniform(*KNOT_STRESS_RANGE, size=segments - 1))
        if is_nonlin[i]:
            laws.append(_stiffening_law(secant, ratios, fracs, sigma_max, i))
        else:
            laws.append(MaterialLaw.linear(secant, id=i))
    return laws


def oracle_label(law: MaterialLaw, sigma_max: float = SIGMA_MAX, width: int = 3) -> np.ndarray:
    """Ground-truth elasticity descriptor: secant at sigma_max, then slopes zero-padded."""
    if len(law.moduli) > width:
        raise ValueError(f"law has {len(law.moduli)} segments, oracle width is {width}")
    out = np.zeros(width + 1)
    out[0] = secant_modulus(law, strain_at(law, sigma_max))
    out[1:1 + len(law.moduli)] = law.moduli
    return out


def save_laws(laws: Iterable[MaterialLaw], path) -> None:
    with open(path, "w") as fh:
        json.dump([law.to_dict() for law in laws], fh, indent=1, sort_keys=True)


def load_laws(path) -> list[MaterialLaw]:
    with open(path) as fh:
        return [MaterialLaw.from_dict(d) for d in json.load(fh)]
