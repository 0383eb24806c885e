import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ectextile import clothsim
from ectextile.clothsim import (
    ClothState,
    SimConfig,
    SimulationError,
    build_cloth,
    downsample,
    downsample_indices,
    downsample_state,
    elastic_energy,
    internal_forces,
    kinetic_energy,
    step,
    with_stable_substeps,
)
from ectextile.eccontext import run_stretch_test
from ectextile.material import MaterialLaw, SampleGeometry, material_family

SMALL = SampleGeometry(rows=5, cols=5)


def random_state(geometry, law, config, seed, scale=0.01):
    rng = np.random.default_rng(seed)
    s = build_cloth(geometry, law, config)
    s.positions[:] += rng.normal(0, scale, s.positions.shape)
    s.velocities[:] = rng.normal(0, 0.05, s.positions.shape)
    return s


@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(2, 7))
def test_newton_third_law(seed, rows, cols):
    g = SampleGeometry(rows=rows, cols=cols)
    law = material_family(5, seed)[seed % 5]
    cfg = SimConfig()
    f = internal_forces(random_state(g, law, cfg, seed, 0.02), g, law, cfg)
    assert np.abs(f.reshape(-1, 3).sum(axis=0)).max() <= 1e-9


def test_rest_state_is_force_free():
    law = MaterialLaw.linear(1e5)
    cfg = SimConfig()
    f = internal_forces(build_cloth(SMALL, law, cfg), SMALL, law, cfg)
    assert np.abs(f).max() < 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_energy_non_increasing(seed):
    law = material_family(10, seed)[seed]
    cfg = with_stable_substeps(law, SMALL, SimConfig())
    s = random_state(SMALL, law, cfg, seed, 0.005)
    energy = [elastic_energy(s, SMALL, law, cfg) + kinetic_energy(s, SMALL, cfg)]
    for _ in range(8):
        s, _ = step(s, np.zeros(3), SMALL, law, cfg)
        energy.append(elastic_energy(s, SMALL, law, cfg) + kinetic_energy(s, SMALL, cfg))
    assert np.all(np.diff(energy) <= 0)


@given(st.lists(st.floats(-0.01, 0.01), min_size=6, max_size=6))
def test_grasp_fidelity(values):
    law = MaterialLaw.linear(1e5)
    cfg = SimConfig(substeps=20)
    s = build_cloth(SMALL, law, cfg)
    action = np.array(values).reshape(2, 3)
    new, _ = step(s, action, SMALL, law, cfg)
    flat0, flat1 = s.flat_positions, new.flat_positions
    assert np.array_equal(flat1[s.grasp_left], flat0[s.grasp_left] + action[0])
    assert np.array_equal(flat1[s.grasp_right], flat0[s.grasp_right] + action[1])


def test_sphere_never_penetrated():
    g = SampleGeometry(rows=9, cols=9)
    law = material_family(4, 3)[1]
    centre, radius = np.array([0.0, 0.0, -0.07]), 0.05
    cfg = with_stable_substeps(law, g, SimConfig(sphere_radius=radius,
                                                 gravity=(0.0, 0.0, -9.81)))
    s = build_cloth(g, law, cfg)
    for _ in range(60):
        s, _ = step(s, np.array([0.0, 0.0, -0.003]), g, law, cfg)
        dist = np.linalg.norm(s.flat_positions - centre, axis=1)
        assert (radius - dist).max() <= 1e-6


def test_stiffer_law_pulls_harder():
    g = SampleGeometry(rows=7, cols=7)
    soft, stiff = MaterialLaw.linear(8e4), MaterialLaw.linear(2e5)
    cfg = with_stable_substeps(stiff, g, SimConfig())
    a, b = build_cloth(g, soft, cfg), build_cloth(g, stiff, cfg)
    pull = np.array([[0.0, -0.002, 0.0], [0.0, 0.002, 0.0]])
    for _ in range(15):
        a, fa = step(a, pull, g, soft, cfg)
        b, fb = step(b, pull, g, stiff, cfg)
        assert fb.magnitude >= fa.magnitude


def test_linear_stretch_force_at_sigma_max():
    g = SampleGeometry(rows=15, cols=15)
    law = MaterialLaw.linear(1.5e5)
    curve = run_stretch_test(law, g, SimConfig())
    force = curve.stress[-1] * g.cross_section
    assert force == pytest.approx(5.4, rel=0.02)
    assert curve.strain[-1] == pytest.approx(0.2, rel=0.02)


def test_force_reading_is_norm_of_left():
    r = clothsim.ForceReading(np.array([3.0, 4.0, 0.0]), np.zeros(3))
    assert r.magnitude == 5.0


def test_config_and_state_invariants():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(substeps=0)
    with pytest.raises(ValueError):
        SimConfig(sphere_radius=-1.0)
    pos = np.zeros((2, 2, 3))
    with pytest.raises(ValueError):
        ClothState(pos, pos.copy(), np.array([0]), np.array([0]))


def test_bad_actions_rejected():
    law = MaterialLaw.linear(1e5)
    s = build_cloth(SMALL, law, SimConfig(substeps=5))
    with pytest.raises(ValueError):
        step(s, np.array([np.nan, 0, 0]), SMALL, law, SimConfig(substeps=5))
    with pytest.raises(ValueError):
        step(s, np.zeros(4), SMALL, law, SimConfig(substeps=5))


def test_instability_reported():
    law = MaterialLaw.linear(1e7)
    cfg = SimConfig(substeps=1, dt=0.5)
    s = random_state(SMALL, law, cfg, 0, 0.01)
    with pytest.raises(SimulationError):
        for _ in range(50):
            s, _ = step(s, np.zeros(3), SMALL, law, cfg)


def test_downsample_examples():
    np.testing.assert_array_equal(downsample_indices(25, 12),
                                  [0, 2, 4, 6, 8, 10, 14, 16, 18, 20, 22, 24])
    idx = downsample_indices(25, 12)
    assert idx[0] == 0 and idx[-1] == 24 and np.all(idx % 2 == 0)
    for n in range(2, 30):
        for t in range(2, n + 1):
            idx = downsample_indices(n, t)
            assert idx.size == t and idx[0] == 0 and idx[-1] == n - 1
            assert np.all(np.diff(idx) > 0)
    grid = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(downsample(grid, 2), [[0, 3], [12, 15]])
    np.testing.assert_array_equal(downsample(grid, 4), grid)
    with pytest.raises(ValueError):
        downsample(grid, 5)


def test_downsample_state_keeps_grippers():
    law = MaterialLaw.linear(1e5)
    s = build_cloth(SampleGeometry(rows=25, cols=25), law, SimConfig())
    d = downsample_state(s, 12)
    assert d.shape == (12, 12)
    idx = downsample_indices(25, 12)
    np.testing.assert_array_equal(d.positions[:, 0], s.positions[idx, 0])
    np.testing.assert_array_equal(d.positions[:, -1], s.positions[idx, -1])
    assert list(d.grasp_left) == [12 * i for i in range(12)]


def test_trajectory_csv_and_manifest(tmp_path):
    pos = np.random.default_rng(0).normal(size=(3, 2, 2, 3))
    path = tmp_path / "traj.csv"
    clothsim.write_trajectory_csv(path, [0.0, 0.1, 0.2], np.zeros((3, 3)), [0.0, 1.0, 2.5], pos)
    rows = list(csv.reader(open(path)))
    assert rows[0][:5] == ["t", "action_x", "action_y", "action_z", "force_N"]
    assert len(rows) == 4 and len(rows[1]) == 5 + 12
    assert float(rows[2][5]) == pos[1, 0, 0, 0]
    man = clothsim.run_manifest(SimConfig(), SMALL, MaterialLaw.linear(1.0), 3)
    assert json.loads(json.dumps(man))["seed"] == 3
