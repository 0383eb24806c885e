"""Experiment drivers: dataset generation, variant comparison and the EC-dimension study.

Each material goes through two stages.  A stretch test yields its
stress-strain curve (from which an EC of any dimension can be derived).  A
dressing task then lowers both grippers over a sphere: after the cloth has
settled under gravity, the grippers descend in equal steps until the sensed
force starts to rise, and the next ``n_actions`` steps are recorded.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import clothsim, eccontext, gnn
from . import tensornet as tn
from .clothsim import SimConfig, SimulationError
from .eccontext import CurveError, ECVector, ProtocolError, StressStrainCurve
from .filters import savitzky_golay
from .material import (
    SIGMA_MAX,
    MaterialLaw,
    SampleGeometry,
    material_family,
    oracle_label,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ORACLE_WIDTH = 3  # slopes kept in the oracle label (plus the secant modulus)


@dataclass(frozen=True)
class BenchConfig:
    """Experiment scale.  Defaults are the desk-scale configuration."""
    n_materials: int = 40
    material_seed: int = 0
    nonlinear_fraction: float = 0.5
    segments: int = 3
    sim_rows: int = 15
    graph_rows: int = 8
    sigma_max: float = SIGMA_MAX
    stretch_steps: int = 200
    a_max: float = 0.022
    n_actions: int = 33
    settle_steps: int = 20
    max_free_steps: int = 300
    onset_threshold: float = 0.05   # N above the running minimum
    sphere_center: tuple[float, float, float] = (0.0, 0.0, -0.07)
    sphere_radius: float = 0.05
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    test_fraction: float = 0.2
    epochs: int = 500
    batch: int = 32
    lr: float = 3e-3                # desk scale runs ~10x fewer optimizer steps
    lr_final: float | None = 3e-4   # cosine decay target; None keeps lr constant
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        for name in ("sphere_center", "gravity", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_materials < 2:
            raise ValueError("n_materials must be >= 2")
        if not 0 < self.test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.graph_rows > self.sim_rows:
            raise ValueError("graph_rows cannot exceed sim_rows")

    @classmethod
    def full_scale(cls, **overrides) -> BenchConfig:
        d = dict(n_materials=100, sim_rows=25, graph_rows=12, a_max=0.12, epochs=2000, lr=3e-4,
                 lr_final=None)
        d.update(overrides)
        return cls(**d)

    @property
    def action_step(self) -> float:
        return self.a_max / self.n_actions

    def geometry(self) -> SampleGeometry:
        return SampleGeometry(rows=self.sim_rows, cols=self.sim_rows)

    def sim_config(self, base: SimConfig | None = None) -> SimConfig:
        base = SimConfig() if base is None else base
        return replace(base, gravity=self.gravity, sphere_center=self.sphere_center,
                       sphere_radius=self.sphere_radius)

    def normalizer(self) -> gnn.Normalizer:
        return gnn.Normalizer(position_scale=self.geometry().rest_length,
                              delta_scale=self.action_step,
                              force_scale=self.sigma_max * self.geometry().cross_section)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d: dict) -> BenchConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench config keys: {sorted(unknown)}")
        return cls(**d)

    def family(self) -> list[MaterialLaw]:
        return material_family(self.n_materials, self.material_seed,
                               nonlinear_fraction=self.nonlinear_fraction,
                               segments=self.segments, sigma_max=self.sigma_max)


# ---------------------------------------------------------------- stage 1 + 2

@dataclass
class MaterialRun:
    law: MaterialLaw
    curve: StressStrainCurve
    onset_step: int                  # free-phase step at which the threshold was crossed
    raw_force: np.ndarray            # whole descent, N
    smoothed_force: np.ndarray
    positions: np.ndarray            # (n_actions + 1, r, c, 3), downsampled
    actions: np.ndarray              # (n_actions, 3)
    forces: np.ndarray               # (n_actions,) smoothed F_{t+1}
    min_sphere_gap: float            # over every full-resolution node and step, m


def dressing_run(law: MaterialLaw, bench: BenchConfig, base: SimConfig | None = None,
                 full_trajectory: bool = False):
    """Settle, descend until contact onset, then record ``n_actions`` steps.

    Returns (onset step, raw forces of the descent, full-resolution states of
    the recorded part, minimum sphere gap).  With `full_trajectory`, every
    descent state is returned instead of only the recorded part.
    """
    geo = bench.geometry()
    cfg = clothsim.with_stable_substeps(law, geo, bench.sim_config(base))
    state = clothsim.build_cloth(geo, law, cfg)
    centre = np.asarray(cfg.sphere_center)
    zero = np.zeros(3)
    for _ in range(bench.settle_steps):
        state, _ = clothsim.step(state, zero, geo, law, cfg)
    action = np.array([0.0, 0.0, -bench.action_step])
    forces, states = [], [state.positions.copy()]
    running_min = math.inf
    onset = None
    gap = math.inf
    for k in range(1, bench.max_free_steps + bench.n_actions + 1):
        state, reading = clothsim.step(state, action, geo, law, cfg)
        f = reading.magnitude
        forces.append(f)
        states.append(state.positions.copy())
        if cfg.sphere_radius > 0:
            d = np.linalg.norm(state.flat_positions - centre, axis=1) - cfg.sphere_radius
            gap = min(gap, float(d.min()))
        running_min = min(running_min, f)
        if onset is None:
            if f > running_min + bench.onset_threshold:
                onset = k
            elif k >= bench.max_free_steps:
                raise ProtocolError(f"material {law.id}: no contact onset within "
                                    f"{bench.max_free_steps} steps")
        elif k >= onset + bench.n_actions:
            break
    states = np.asarray(states)
    if not full_trajectory:
        states = states[onset:onset + bench.n_actions + 1]
    return onset, np.asarray(forces), states, gap


def simulate_material(law: MaterialLaw, bench: BenchConfig,
                      base: SimConfig | None = None) -> MaterialRun:
    geo = bench.geometry()
    stretch_cfg = SimConfig() if base is None else base
    curve = eccontext.run_stretch_test(law, geo, stretch_cfg, bench.sigma_max,
                                       bench.stretch_steps)
    eccontext.compute_ec(curve, 1, bench.sigma_max)  # reject uninvertible curves early
    onset, raw, states, gap = dressing_run(law, bench, base)
    smooth = savitzky_golay(raw, eccontext.SG_WINDOW, eccontext.SG_DEGREE)
    # forces[t] is the reading after recorded action t (state t -> t + 1)
    rec = smooth[onset:onset + bench.n_actions].copy()
    pos = np.stack([clothsim.downsample(s, bench.graph_rows) for s in states])
    actions = np.tile([0.0, 0.0, -bench.action_step], (bench.n_actions, 1))
    return MaterialRun(law, curve, onset, raw, smooth, pos, actions, np.maximum(rec, 0.0), gap)


def _simulate_or_skip(args):
    law, bench, base = args
    try:
        return simulate_material(law, bench, base)
    except (SimulationError, ProtocolError, CurveError) as exc:
        log.warning("material %d skipped: %s", law.id, exc)
        return {"material_id": law.id, "reason": f"{type(exc).__name__}: {exc}"}


# ---------------------------------------------------------------- dataset

@dataclass
class DatasetRecord:
    material_id: int
    G_t: np.ndarray
    G_next: np.ndarray
    F_next: float
    action: np.ndarray
    ec: ECVector
    oracle_label: np.ndarray


@dataclass
class Dataset:
    manifest: dict
    positions: np.ndarray        # (M, r, c, 3) G_t
    next_positions: np.ndarray   # (M, r, c, 3) G_{t+1}
    force: np.ndarray            # (M,) F_{t+1}
    action: np.ndarray           # (M, 3)
    material_id: np.ndarray      # (M,)
    step: np.ndarray             # (M,) index within the material's sequence

    ARRAYS = ("positions", "next_positions", "force", "action", "material_id", "step")

    def __len__(self):
        return self.force.shape[0]

    @property
    def material_ids(self) -> list[int]:
        return [m["id"] for m in self.manifest["materials"]]

    @property
    def sigma_max(self) -> float:
        return self.manifest["bench"]["sigma_max"]

    def _material(self, mid: int) -> dict:
        for m in self.manifest["materials"]:
            if m["id"] == mid:
                return m
        raise KeyError(f"material {mid} not in dataset")

    def law(self, mid: int) -> MaterialLaw:
        return MaterialLaw.from_dict(self._material(mid)["law"])

    def curve(self, mid: int) -> StressStrainCurve:
        m = self._material(mid)
        geo = SampleGeometry.from_dict(self.manifest["geometry"])
        return eccontext.curve_from_dict({"curve": m["curve"], "material_id": mid}, geo)

    def ec(self, mid: int, n_ec: int) -> ECVector:
        return eccontext.compute_ec(self.curve(mid), n_ec, self.sigma_max)

    def oracle(self, mid: int) -> np.ndarray:
        return oracle_label(self.law(mid), self.sigma_max, ORACLE_WIDTH)

    def edge_input(self, mid: int, variant: gnn.Variant) -> np.ndarray:
        if variant.kind is gnn.VariantKind.EC:
            return np.asarray(self.ec(mid, variant.n_ec).moduli)
        if variant.kind is gnn.VariantKind.ORACLE:
            return self.oracle(mid)
        return np.zeros(1)

    def records(self, n_ec: int = 1):
        cache = {}
        for k in range(len(self)):
            mid = int(self.material_id[k])
            if mid not in cache:
                cache[mid] = (self.ec(mid, n_ec), self.oracle(mid))
            ec, lab = cache[mid]
            yield DatasetRecord(mid, self.positions[k], self.next_positions[k],
                                float(self.force[k]), self.action[k], ec, lab)

    def rows_of(self, ids) -> np.ndarray:
        return np.flatnonzero(np.isin(self.material_id, list(ids)))

    def graph_dataset(self, variant: gnn.Variant, ids) -> gnn.GraphDataset:
        rows = self.rows_of(ids)
        mids = self.material_id[rows]
        width = variant.edge_dim(ORACLE_WIDTH + 1)
        table = {int(m): self.edge_input(int(m), variant) for m in np.unique(mids)}
        edge = np.array([table[int(m)] for m in mids]).reshape(rows.size, width)
        return gnn.GraphDataset(self.positions[rows], self.next_positions[rows],
                                self.force[rows], self.action[rows], mids, edge)

    def trajectory(self, mid: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positions (S + 1, r, c, 3), actions (S, 3), forces (S,)) for one material."""
        rows = self.rows_of([mid])
        rows = rows[np.argsort(self.step[rows])]
        pos = np.concatenate([self.positions[rows[:1]], self.next_positions[rows]])
        return pos, self.action[rows], self.force[rows]


def generate_dataset(bench: BenchConfig = BenchConfig(), base: SimConfig | None = None,
                     laws: list[MaterialLaw] | None = None, jobs: int = 1) -> Dataset:
    """Simulate every material and assemble the one-step transition records."""
    laws = bench.family() if laws is None else laws
    if len(laws) < 2:
        raise ValueError("need at least 2 materials")
    jobs_args = [(law, bench, base) for law in laws]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_simulate_or_skip, jobs_args))
    else:
        results = [_simulate_or_skip(a) for a in jobs_args]
    runs = [r for r in results if isinstance(r, MaterialRun)]
    skipped = [r for r in results if isinstance(r, dict)]
    if len(runs) < 2:
        raise RuntimeError(f"only {len(runs)} materials simulated successfully")
    geo = bench.geometry()
    materials = []
    for run in runs:
        materials.append({
            "id": run.law.id, "law": run.law.to_dict(), "onset_step": run.onset_step,
            "min_sphere_gap": run.min_sphere_gap,
            "curve": [[e, s] for e, s in run.curve.points],
            "raw_force": run.raw_force.tolist(), "smoothed_force": run.smoothed_force.tolist()})
    n = bench.n_actions
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "bench": bench.to_dict(),
        "sim_config": (SimConfig() if base is None else base).to_dict(),
        "geometry": geo.to_dict(),
        "graph_shape": [bench.graph_rows, bench.graph_rows],
        "n_records": len(runs) * n,
        "materials": materials,
        "skipped": skipped,
    }
    return Dataset(
        manifest,
        positions=np.concatenate([r.positions[:-1] for r in runs]),
        next_positions=np.concatenate([r.positions[1:] for r in runs]),
        force=np.concatenate([r.forces for r in runs]),
        action=np.concatenate([r.actions for r in runs]),
        material_id=np.repeat([r.law.id for r in runs], n).astype(np.int64),
        step=np.tile(np.arange(n), len(runs)).astype(np.int64))


def _atomic_dir(path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))


def _replace_dir(tmp: Path, path: Path) -> None:
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)


def save_dataset(ds: Dataset, path) -> Path:
    """Write a dataset directory (manifest.json + one .npy per array) atomically."""
    path = Path(path)
    tmp = _atomic_dir(path)
    try:
        with open(tmp / "manifest.json", "w") as fh:
            json.dump(ds.manifest, fh, indent=1, sort_keys=True)
        for name in Dataset.ARRAYS:
            np.save(tmp / f"{name}.npy", np.ascontiguousarray(getattr(ds, name)))
        _replace_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')}")
    arrays = {name: np.load(path / f"{name}.npy") for name in Dataset.ARRAYS}
    return Dataset(manifest, **arrays)


# ---------------------------------------------------------------- comparison

def split_materials(ids, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Disjoint (train, test) material ids; the test set has ceil(fraction * n) entries."""
    ids = sorted(int(i) for i in ids)
    n_test = max(1, int(math.ceil(test_fraction * len(ids))))
    if n_test >= len(ids):
        raise ValueError("split leaves no training materials")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[k] for k in perm[:n_test])
    train = sorted(set(ids) - set(test))
    return train, test


def rollout_errors(roll: gnn.Rollout, true_pos: np.ndarray, true_force: np.ndarray
                   ) -> tuple[float, float]:
    """Force MSE (N^2) and free-node position MSE (m^2) over the predicted steps."""
    s = roll.force.size
    f = float(np.mean((roll.force - true_force[:s]) ** 2))
    rows, cols = true_pos.shape[1:3]
    free = ~gnn.grasp_mask_for(rows, cols).reshape(rows, cols)
    diff = roll.positions[1:s + 1] - true_pos[1:s + 1]
    g = float(np.mean(diff[:, free] ** 2)) if s else float("nan")
    return f, g


@dataclass
class VariantResult:
    label: str
    force_mse: dict = field(default_factory=dict)      # "seed/material" -> value
    graph_mse: dict = field(default_factory=dict)
    predicted_force: dict = field(default_factory=dict)  # "seed/material" -> list
    diverged: list = field(default_factory=list)
    loss_history: dict = field(default_factory=dict)   # seed -> list

    def stats(self, which: str = "force") -> tuple[float, float]:
        vals = np.array(list((self.force_mse if which == "force" else self.graph_mse).values()))
        if vals.size == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())


@dataclass
class ExperimentReport:
    variants: dict                    # label -> VariantResult
    train_ids: list
    test_ids: list
    seeds: list
    true_force: dict                  # material -> list
    config_hash: str
    curves: dict = field(default_factory=dict)   # material -> [[eps, sigma], ...]
    ec_study: dict | None = None

    def summary(self) -> dict:
        out = {}
        for label, res in self.variants.items():
            fm, fs = res.stats("force")
            gm, gs = res.stats("graph")
            out[label] = {"force_mse_mean": fm, "force_mse_std": fs,
                          "graph_mse_mean": gm, "graph_mse_std": gs,
                          "diverged": len(res.diverged)}
        return out

    def to_dict(self) -> dict:
        return {"variants": {k: asdict(v) for k, v in self.variants.items()},
                "train_ids": self.train_ids, "test_ids": self.test_ids, "seeds": self.seeds,
                "true_force": {str(k): v for k, v in self.true_force.items()},
                "config_hash": self.config_hash,
                "curves": {str(k): v for k, v in self.curves.items()},
                "ec_study": self.ec_study, "summary": self.summary()}

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentReport:
        return cls({k: VariantResult(**v) for k, v in d["variants"].items()},
                   d["train_ids"], d["test_ids"], d["seeds"],
                   {int(k): v for k, v in d["true_force"].items()}, d["config_hash"],
                   {int(k): v for k, v in d.get("curves", {}).items()}, d.get("ec_study"))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> ExperimentReport:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def config_hash(*parts: dict) -> str:
    blob = json.dumps(parts, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def train_variant(ds: Dataset, variant: gnn.Variant, train_ids, seed: int,
                  bench: BenchConfig, workers: int = 1) -> gnn.TrainResult:
    model = gnn.GnnModel(variant, seed=seed, norm=bench.normalizer(),
                         oracle_width=ORACLE_WIDTH + 1)
    data = ds.graph_dataset(variant, train_ids)
    return gnn.train(model, data, epochs=bench.epochs, batch=bench.batch, lr=bench.lr,
                     seed=seed, workers=workers, lr_final=bench.lr_final)


def evaluate_variant(model: gnn.GnnModel, ds: Dataset, test_ids) -> dict:
    """Rollout every test material; per-material force/graph MSE and force trajectory."""
    out = {}
    for mid in test_ids:
        pos, actions, forces = ds.trajectory(mid)
        roll = gnn.rollout(model, pos[0], actions, ds.edge_input(mid, model.variant))
        f, g = rollout_errors(roll, pos, forces)
        out[mid] = {"force_mse": f, "graph_mse": g, "force": roll.force.tolist(),
                    "diverged": roll.diverged}
    return out


def _comparison_job(args):
    ds_path, variant, train_ids, test_ids, seed, bench = args
    ds = load_dataset(ds_path) if not isinstance(ds_path, Dataset) else ds_path
    result = train_variant(ds, variant, train_ids, seed, bench)
    return result.loss_history, evaluate_variant(result.model, ds, test_ids)


def run_comparison(ds: Dataset | str | os.PathLike, variants=None, bench: BenchConfig | None = None,
                   split_seed: int = 0, jobs: int = 1) -> ExperimentReport:
    """Train each variant for every seed on one material split and roll out the test set."""
    ds_obj = ds if isinstance(ds, Dataset) else load_dataset(ds)
    if bench is None:
        bench = BenchConfig.from_dict(ds_obj.manifest["bench"])
    if variants is None:
        variants = [gnn.Variant.baseline(), gnn.Variant.ec(1), gnn.Variant.ec(2),
                    gnn.Variant.ec(5), gnn.Variant.oracle()]
    train_ids, test_ids = split_materials(ds_obj.material_ids, bench.test_fraction, split_seed)
    assert not set(train_ids) & set(test_ids), "split hygiene violated"
    jobs_args = [(ds if jobs > 1 and not isinstance(ds, Dataset) else ds_obj, v, train_ids,
                  test_ids, s, bench) for v in variants for s in bench.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            outputs = list(pool.map(_comparison_job, jobs_args))
    else:
        outputs = [_comparison_job(a) for a in jobs_args]
    results = {v.label: VariantResult(v.label) for v in variants}
    for (_, v, _, _, seed, _), (history, per_mat) in zip(jobs_args, outputs):
        res = results[v.label]
        res.loss_history[str(seed)] = history
        for mid, r in per_mat.items():
            key = f"{seed}/{mid}"
            res.force_mse[key] = r["force_mse"]
            res.graph_mse[key] = r["graph_mse"]
            res.predicted_force[key] = r["force"]
            if r["diverged"]:
                res.diverged.append(key)
                log.warning("%s diverged on %s", v.label, key)
    true_force = {mid: ds_obj.trajectory(mid)[2].tolist() for mid in test_ids}
    curves = {mid: ds_obj.curve(mid).points for mid in test_ids}
    return ExperimentReport(results, train_ids, test_ids, list(bench.seeds), true_force,
                            config_hash(bench.to_dict(), ds_obj.manifest["sim_config"],
                                        [v.label for v in variants]),
                            {k: [list(p) for p in v] for k, v in curves.items()})


# ---------------------------------------------------------------- EC-dimension study

@dataclass(frozen=True)
class StudyConfig:
    n_ec_values: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    test_samples: int = 8
    epochs: int = 1000
    hidden: int = 8
    batch: int = 32
    lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "n_ec_values", tuple(self.n_ec_values))
        object.__setattr__(self, "seeds", tuple(self.seeds))


def study_inputs(ds: Dataset, ids, n_ec: int) -> tuple[np.ndarray, np.ndarray]:
    """(cumulative displacement / a_max, EC * 1e-5) features and force / F_max targets."""
    bench = ds.manifest["bench"]
    a_max = bench["a_max"]
    f_max = bench["sigma_max"] * ds.manifest["geometry"]["cross_section"]
    xs, ys = [], []
    for mid in ids:
        _, actions, forces = ds.trajectory(mid)
        disp = np.cumsum(np.linalg.norm(actions, axis=1)) / a_max
        ec = (np.asarray(ds.ec(mid, n_ec).moduli) * eccontext.EC_SCALE if n_ec
              else np.zeros(0))
        xs.append(np.column_stack([disp, np.tile(ec, (disp.size, 1))]))
        ys.append(forces / f_max)
    return np.concatenate(xs), np.concatenate(ys)


def train_study_mlp(x: np.ndarray, y: np.ndarray, hidden: int, epochs: int, batch: int,
                    lr: float, seed: int) -> tn.Mlp:
    rng = np.random.default_rng(seed)
    mlp = tn.Mlp([x.shape[1], hidden, hidden, 1], rng, layer_norm=False, name="study")
    params = mlp.parameters()
    adam = tn.AdamState(lr=lr)
    for _ in range(epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], batch):
            idx = order[start:start + batch]
            for p in params:
                p.grad = None
            tape = tn.Tape()
            with tape:
                value = tn.mse(mlp(x[idx]), y[idx, None])
            tape.backward(value)
            tn.adam_step(params, [p.grad for p in params], adam)
    return mlp


def run_ec_dim_study(ds: Dataset, study: StudyConfig = StudyConfig()) -> dict:
    """Per-n_EC test MSE (N^2) of a small force regressor, mean and std over seeds."""
    f_max = ds.manifest["bench"]["sigma_max"] * ds.manifest["geometry"]["cross_section"]
    ids = ds.material_ids
    frac = study.test_samples / len(ids)
    table = {}
    for n_ec in study.n_ec_values:
        per_seed = []
        for seed in study.seeds:
            train_ids, test_ids = split_materials(ids, frac, seed)
            x, y = study_inputs(ds, train_ids, n_ec)
            mlp = train_study_mlp(x, y, study.hidden, study.epochs, study.batch, study.lr, seed)
            xt, yt = study_inputs(ds, test_ids, n_ec)
            pred = mlp(xt).value[:, 0]
            per_seed.append(float(np.mean(((pred - yt) * f_max) ** 2)))
        table[str(n_ec)] = {"mean": float(np.mean(per_seed)), "std": float(np.std(per_seed)),
                            "per_seed": per_seed}
        log.info("n_ec=%d mse %.4g +- %.2g", n_ec, table[str(n_ec)]["mean"],
                 table[str(n_ec)]["std"])
    return {"config": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in asdict(study).items()}, "results": table}


# ---------------------------------------------------------------- report rendering

def _csv(rows: list[list]) -> str:
    return "".join(",".join(str(c) for c in r) + "\n" for r in rows)


def render_report(report: ExperimentReport, out_dir, plots: bool = True) -> dict:
    """Write markdown summary, CSVs of every plotted series and SVG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    traj = [["variant", "seed", "material_id", "step", "force_true_N", "force_pred_N"]]
    for label, res in report.variants.items():
        for key in sorted(res.predicted_force, key=lambda k: tuple(map(int, k.split("/")))):
            seed, mid = key.split("/")
            truth = report.true_force[int(mid)]
            for t, f in enumerate(res.predicted_force[key]):
                traj.append([label, seed, mid, t, repr(truth[t]), repr(f)])
    written["trajectories"] = out / "trajectories.csv"
    atomic_write_text(written["trajectories"], _csv(traj))

    metrics = [["variant", "seed", "material_id", "force_mse", "graph_mse"]]
    for label, res in report.variants.items():
        for key in sorted(res.force_mse, key=lambda k: tuple(map(int, k.split("/")))):
            seed, mid = key.split("/")
            metrics.append([label, seed, mid, repr(res.force_mse[key]),
                            repr(res.graph_mse[key])])
    written["metrics"] = out / "metrics.csv"
    atomic_write_text(written["metrics"], _csv(metrics))

    curves = [["material_id", "strain", "stress_pa"]]
    for mid in sorted(report.curves):
        curves += [[mid, repr(e), repr(s)] for e, s in report.curves[mid]]
    written["curves"] = out / "curves.csv"
    atomic_write_text(written["curves"], _csv(curves))

    if report.ec_study:
        rows = [["n_ec", "mse_mean", "mse_std"]]
        for k in sorted(report.ec_study["results"], key=int):
            r = report.ec_study["results"][k]
            rows.append([k, repr(r["mean"]), repr(r["std"])])
        written["ec_study"] = out / "ec_study.csv"
        atomic_write_text(written["ec_study"], _csv(rows))

    written["summary"] = out / "summary.md"
    atomic_write_text(written["summary"], _markdown(report))
    if plots:
        written.update(_plots(report, out))
    return written


def _markdown(report: ExperimentReport) -> str:
    lines = ["# Force forecasting comparison", "",
             f"Config hash `{report.config_hash}`; seeds {report.seeds}; "
             f"{len(report.test_ids)} held-out materials {report.test_ids}.", ""]
    summary = report.summary()
    if summary:
        lines += ["| variant | force MSE [N^2] | graph MSE [m^2] | diverged |",
                  "|---|---|---|---|"]
        for label, s in summary.items():
            lines.append(f"| {label} | {s['force_mse_mean']:.4g} ± {s['force_mse_std']:.2g} | "
                         f"{s['graph_mse_mean']:.3g} ± {s['graph_mse_std']:.2g} | "
                         f"{s['diverged']} |")
        lines.append("")
    for label, s in summary.items():
        lines += [f"## {label}", "",
                  f"Mean force MSE {s['force_mse_mean']:.6g} N^2 over "
                  f"{len(report.variants[label].force_mse)} (seed, material) rollouts.", ""]
    if report.ec_study:
        lines += ["## EC dimension study", "", "| n_EC | MSE [N^2] |", "|---|---|"]
        for k in sorted(report.ec_study["results"], key=int):
            r = report.ec_study["results"][k]
            lines.append(f"| {k} | {r['mean']:.4g} ± {r['std']:.2g} |")
        lines.append("")
    return "\n".join(lines)


def _plots(report: ExperimentReport, out: Path) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "ectextile"
    meta = {"Date": None}
    written = {}
    seed0 = str(report.seeds[0]) if report.seeds else None
    for mid in report.test_ids:
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(report.true_force[mid], "k-", label="ground truth")
        for label, res in report.variants.items():
            series = res.predicted_force.get(f"{seed0}/{mid}")
            if series is not None:
                ax.plot(series, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("force [N]")
        ax.set_title(f"material {mid}")
        ax.legend(fontsize=6)
        path = out / f"force_material_{mid}.svg"
        fig.savefig(path, metadata=meta, bbox_inches="tight")
        plt.close(fig)
        written[f"force_{mid}"] = path
    if report.curves:
        fig, ax = plt.subplots(figsize=(4, 3))
        for mid in sorted(report.curves):
            pts = np.asarray(report.curves[mid])
            ax.plot(pts[:, 0], pts[:, 1] / 1e3, lw=0.8)
        ax.set_xlabel("strain")
        ax.set_ylabel("stress [kPa]")
        path = out / "stress_strain.svg"
        fig.savefig(path, metadata=meta, bbox_inches="tight")
        plt.close(fig)
        written["stress_strain"] = path
    if report.ec_study:
        res = report.ec_study["results"]
        keys = sorted(res, key=int)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.bar([int(k) for k in keys], [res[k]["mean"] for k in keys],
               yerr=[res[k]["std"] for k in keys], color="0.6")
        ax.set_xlabel("n_EC")
        ax.set_ylabel("force MSE [N^2]")
        path = out / "ec_study.svg"
        fig.savefig(path, metadata=meta, bbox_inches="tight")
        plt.close(fig)
        written["ec_study_plot"] = path
    return written
