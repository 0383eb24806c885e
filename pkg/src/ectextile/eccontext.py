"""Stretch-test protocol, stress-strain curves and Elastic Context vectors.

The Elastic Context of a sample is the vector of secant moduli
``e_i = sigma_i / eps_i`` read off its stress-strain curve at the stresses
``sigma_i = i * sigma_max / n_ec`` for ``i = 1..n_ec``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import clothsim
from .clothsim import SimConfig
from .filters import savitzky_golay
from .material import SIGMA_MAX, MaterialLaw, SampleGeometry, stress_array

log = logging.getLogger(__name__)

SG_WINDOW = 21
SG_DEGREE = 3
STRAIN_CAP = 1.0
PROBE_INCREMENT = 0.01  # strain per probe step
EC_SCALE = 1.0e-5       # 1/Pa, maps typical moduli to O(1)


class ProtocolError(RuntimeError):
    """The stretch test could not reach sigma_max."""


class CurveError(ValueError):
    """A curve cannot be inverted at a requested stress."""


@dataclass
class StressStrainCurve:
    strain: np.ndarray
    stress: np.ndarray
    geometry: SampleGeometry
    material_id: int = -1

    def __post_init__(self):
        self.strain = np.asarray(self.strain, dtype=np.float64)
        self.stress = np.asarray(self.stress, dtype=np.float64)
        if self.strain.shape != self.stress.shape or self.strain.ndim != 1:
            raise ValueError("strain and stress must be 1-D arrays of equal length")
        if np.any(np.diff(self.strain) < 0):
            raise ValueError("strains must be non-decreasing")
        if np.any(self.stress < 0):
            raise ValueError("stresses must be non-negative")

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.strain.tolist(), self.stress.tolist()))

    def __len__(self):
        return self.strain.size


@dataclass(frozen=True)
class ECVector:
    moduli: tuple[float, ...]
    sigma_max: float = SIGMA_MAX

    def __post_init__(self):
        object.__setattr__(self, "moduli", tuple(float(m) for m in self.moduli))
        if len(self.moduli) < 1:
            raise ValueError("n_ec must be >= 1")
        if not all(m > 0 for m in self.moduli):
            raise ValueError(f"EC moduli must be positive: {self.moduli}")

    @property
    def n_ec(self) -> int:
        return len(self.moduli)

    @property
    def stresses(self) -> np.ndarray:
        return self.sigma_max * np.arange(1, self.n_ec + 1) / self.n_ec

    def normalized(self) -> np.ndarray:
        return np.asarray(self.moduli) * EC_SCALE

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.moduli, dtype=dtype)


def curve_from_trace(force, elongation, geometry: SampleGeometry,
                     material_id: int = -1) -> StressStrainCurve:
    """Convert a (smoothed) force trace and sample elongation to stress/strain."""
    force = np.asarray(force, dtype=np.float64)
    elongation = np.asarray(elongation, dtype=np.float64)
    return StressStrainCurve(elongation / geometry.rest_length,
                             np.maximum(force / geometry.cross_section, 0.0),
                             geometry, material_id)


def stretch_config(law: MaterialLaw, geometry: SampleGeometry, config: SimConfig) -> SimConfig:
    """Stretch tests run without gravity or obstacles, with stable substeps."""
    cfg = replace(config, gravity=(0.0, 0.0, 0.0), sphere_radius=0.0)
    return clothsim.with_stable_substeps(law, geometry, cfg)


def _pull(state, increment: float, geometry, law, cfg):
    half = 0.5 * increment * geometry.rest_length
    action = np.array([[0.0, -half, 0.0], [0.0, half, 0.0]])
    return clothsim.step(state, action, geometry, law, cfg)


def probe_crossing_strain(law: MaterialLaw, geometry: SampleGeometry, config: SimConfig,
                          sigma_max: float = SIGMA_MAX) -> float:
    """Coarse pass: strain of the first probe step whose stress reaches sigma_max."""
    cfg = stretch_config(law, geometry, config)
    state = clothsim.build_cloth(geometry, law, cfg)
    n_max = int(math.ceil(STRAIN_CAP / PROBE_INCREMENT))
    for k in range(1, n_max + 1):
        state, reading = _pull(state, PROBE_INCREMENT, geometry, law, cfg)
        if reading.magnitude / geometry.cross_section >= sigma_max:
            return k * PROBE_INCREMENT
    raise ProtocolError(f"material {law.id}: sigma_max={sigma_max:g} Pa not reached "
                        f"within strain {STRAIN_CAP}")


def run_stretch_test(law: MaterialLaw, geometry: SampleGeometry, config: SimConfig,
                     sigma_max: float = SIGMA_MAX, n_steps: int = 200,
                     return_trace: bool = False):
    """Pull the grippers apart in equal increments until sigma_max is reached.

    A coarse probe (strain steps of 0.01) locates the crossing strain; the
    recorded pass then uses ``n_steps`` equal increments up to that strain and
    continues until the Savitzky-Golay smoothed stress crosses sigma_max with
    half a window of samples beyond it.  The curve is truncated at the first
    smoothed crossing.
    """
    if n_steps < 33:
        raise ValueError("n_steps must be >= 33")
    eps_probe = probe_crossing_strain(law, geometry, config, sigma_max)
    increment = eps_probe / n_steps
    cfg = stretch_config(law, geometry, config)
    state = clothsim.build_cloth(geometry, law, cfg)
    forces, strains = [0.0], [0.0]
    positions = [state.positions.copy()] if return_trace else None
    half = SG_WINDOW // 2
    tail = None
    n_max = int(math.ceil(STRAIN_CAP / increment))
    smoothed = None
    for k in range(1, n_max + 1):
        state, reading = _pull(state, increment, geometry, law, cfg)
        forces.append(reading.magnitude)
        strains.append(k * increment)
        if return_trace:
            positions.append(state.positions.copy())
        if tail is None and reading.magnitude >= sigma_max * geometry.cross_section:
            tail = half
        elif tail is not None:
            tail -= 1
        if tail is not None and tail <= 0 and len(forces) >= SG_WINDOW:
            smoothed = savitzky_golay(forces, SG_WINDOW, SG_DEGREE)
            if np.any(smoothed >= sigma_max * geometry.cross_section):
                break
    else:
        raise ProtocolError(f"material {law.id}: smoothed stress never reached "
                            f"{sigma_max:g} Pa within strain {STRAIN_CAP}")
    cut = int(np.argmax(smoothed >= sigma_max * geometry.cross_section))
    smoothed = smoothed.copy()
    smoothed[0] = 0.0
    elong = np.asarray(strains) * geometry.rest_length
    curve = curve_from_trace(smoothed[:cut + 1], elong[:cut + 1], geometry, law.id)
    if return_trace:
        return curve, {"raw_force": np.asarray(forces), "smoothed_force": smoothed,
                       "strain": np.asarray(strains), "config": cfg,
                       "increment": increment, "positions": np.asarray(positions)}
    return curve


def analytic_curve(law: MaterialLaw, geometry: SampleGeometry, sigma_max: float = SIGMA_MAX,
                   n_points: int = 200) -> StressStrainCurve:
    """Exact curve of a law sampled up to sigma_max (the last point hits it exactly)."""
    from .material import strain_at
    eps_end = strain_at(law, sigma_max)
    eps = np.linspace(0.0, eps_end, n_points)
    sig = stress_array(law, eps)
    sig[-1] = sigma_max
    return StressStrainCurve(eps, sig, geometry, law.id)


def _monotone(curve: StressStrainCurve) -> tuple[np.ndarray, np.ndarray]:
    # keep only points that raise the running maximum (first of repeated values)
    sig, eps = curve.stress, curve.strain
    keep = np.ones(sig.size, dtype=bool)
    running = -np.inf
    for k, s in enumerate(sig):
        if s > running:
            running = s
        else:
            keep[k] = False
    return eps[keep], sig[keep]


def compute_ec(curve: StressStrainCurve, n_ec: int, sigma_max: float = SIGMA_MAX) -> ECVector:
    """Secant moduli at ``n_ec`` equidistant stresses in (0, sigma_max]."""
    if n_ec < 1:
        raise ValueError("n_ec must be >= 1")
    if curve.stress.size == 0 or curve.stress.max() < sigma_max:
        top = curve.stress.max() if curve.stress.size else 0.0
        raise CurveError(f"curve peaks at {top:g} Pa, below sigma_max={sigma_max:g} Pa")
    targets = sigma_max * np.arange(1, n_ec + 1) / n_ec
    raw = curve.stress
    flat = np.flatnonzero(np.diff(raw) == 0)
    for t in targets:
        if np.any(raw[flat] == t):
            raise CurveError(f"curve is flat at target stress {t:g} Pa")
    eps, sig = _monotone(curve)
    eps_t = np.interp(targets, sig, eps)
    if np.any(eps_t <= 0):
        raise CurveError("curve inversion produced non-positive strain")
    return ECVector(tuple(targets / eps_t), sigma_max)


def ec_scale_check(law: MaterialLaw, geometry_a: SampleGeometry, geometry_b: SampleGeometry,
                   n_ec: int, config: SimConfig | None = None,
                   sigma_max: float = SIGMA_MAX, n_steps: int = 200) -> float:
    """Largest relative EC difference between two sample sizes of one law."""
    config = SimConfig() if config is None else config
    ec_a = compute_ec(run_stretch_test(law, geometry_a, config, sigma_max, n_steps), n_ec,
                      sigma_max)
    if geometry_b == geometry_a:
        ec_b = ec_a
    else:
        ec_b = compute_ec(run_stretch_test(law, geometry_b, config, sigma_max, n_steps), n_ec,
                          sigma_max)
    a, b = np.asarray(ec_a.moduli), np.asarray(ec_b.moduli)
    return float(np.max(np.abs(a - b) / a))


def ec_to_dict(ec: ECVector, curve: StressStrainCurve | None = None,
               material_id: int | None = None) -> dict:
    d = {"material_id": material_id if material_id is not None
         else (curve.material_id if curve is not None else -1),
         "sigma_max": ec.sigma_max, "n_ec": ec.n_ec, "moduli": list(ec.moduli)}
    if curve is not None:
        d["curve"] = [[e, s] for e, s in curve.points]
    return d


def ec_from_dict(d: dict) -> ECVector:
    if int(d["n_ec"]) != len(d["moduli"]):
        raise ValueError("n_ec does not match the number of moduli")
    return ECVector(tuple(d["moduli"]), float(d["sigma_max"]))


def curve_from_dict(d: dict, geometry: SampleGeometry) -> StressStrainCurve:
    pts = np.asarray(d["curve"], dtype=np.float64).reshape(-1, 2)
    return StressStrainCurve(pts[:, 0], pts[:, 1], geometry, int(d.get("material_id", -1)))


def write_ec_json(path, ec: ECVector, curve: StressStrainCurve | None = None,
                  material_id: int | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(ec_to_dict(ec, curve, material_id), fh, indent=1)


def write_curve_csv(path, curve: StressStrainCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strain", "stress_pa"])
        for e, s in curve.points:
            w.writerow([repr(e), repr(s)])
