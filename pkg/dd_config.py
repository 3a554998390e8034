"""
Experiment Configuration (dd_config.py)
═══════════════════════════════════════
One JSON document describes a full experiment: plant, boxes, horizons, the
dataset experiment, set-building knobs, controller weights and tolerances.
See example_config.json for the reference experiment.

    cfg = load_config("example_config.json", seed=3)
    cfg.N            # N_p + T_ini
    cfg.reach.seed   # 3, as is cfg.dataset.seed
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from dd_control import EPS_CONV, ControllerWeights
from dd_geometry import MEMBERSHIP_TOL
from dd_hankel import min_dataset_length
from dd_plant import ConstraintBoxes, PlantSpec
from dd_qp import QpSettings
from dd_reach import ReachConfig

log = logging.getLogger(__name__)

TOP_KEYS = {"plant", "boxes", "T_ini", "N_p", "dataset", "reach", "weights", "x0",
            "ddpc_steps", "hold_steps", "verify", "tolerances"}
PLANT_KEYS = {"A", "B", "C", "D"}
BOX_KEYS = {"u_max", "y_max", "u_lo", "u_hi", "y_lo", "y_hi"}
DATASET_KEYS = {"length", "seed", "amplitude", "x0"}
REACH_KEYS = {"n_star", "N_i", "seed", "prune", "excitation", "hold_max", "vertex_cap"}
WEIGHT_KEYS = {"Q_y", "Q_u"}
VERIFY_KEYS = {"samples", "seed"}
TOLERANCE_KEYS = {"membership", "convergence", "qp_eq", "qp_in", "qp_stat"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    length: int = 200
    seed: int = 0
    amplitude: float = 1.0
    x0: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Tolerances:
    membership: float = MEMBERSHIP_TOL
    convergence: float = EPS_CONV
    qp_eq: float = 1e-8
    qp_in: float = 1e-8
    qp_stat: float = 1e-6

    def qp_settings(self) -> QpSettings:
        return QpSettings(eps_eq=self.qp_eq, eps_in=self.qp_in, eps_stat=self.qp_stat)


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantSpec
    boxes: ConstraintBoxes
    T_ini: int
    N_p: int
    dataset: DatasetConfig
    reach: ReachConfig
    weights: ControllerWeights
    x0: np.ndarray
    ddpc_steps: int = 8
    hold_steps: int = 0
    verify_samples: int = 20
    verify_seed: int = 0
    tolerances: Tolerances = field(default_factory=Tolerances)

    @property
    def N(self) -> int:
        return self.N_p + self.T_ini

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Every seed replaced by `seed`."""
        return replace(self,
                       dataset=replace(self.dataset, seed=seed),
                       reach=replace(self.reach, seed=seed),
                       verify_seed=seed)


# ── Parsing ────────────────────────────────────────────────────

def _section(data, name: str, allowed: set) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    return data


def _boxes(section: dict) -> ConstraintBoxes:
    if "u_max" in section or "y_max" in section:
        if not {"u_max", "y_max"} <= set(section) or set(section) & {"u_lo", "u_hi", "y_lo", "y_hi"}:
            raise ConfigError("'boxes' takes either u_max and y_max, or u_lo, u_hi, y_lo and y_hi")
        return ConstraintBoxes.symmetric(section["u_max"], section["y_max"])
    missing = {"u_lo", "u_hi", "y_lo", "y_hi"} - set(section)
    if missing:
        raise ConfigError(f"'boxes' is missing {', '.join(sorted(missing))}")
    return ConstraintBoxes(section["u_lo"], section["u_hi"], section["y_lo"], section["y_hi"])


def parse_config(data: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a decoded JSON object."""
    top = _section(data, "config", TOP_KEYS)
    for key in ("plant", "boxes", "T_ini", "N_p", "x0"):
        if key not in top:
            raise ConfigError(f"missing required key '{key}'")
    try:
        plant_s = _section(top["plant"], "plant", PLANT_KEYS)
        plant = PlantSpec(*(np.array(plant_s[k], dtype=float) for k in "ABCD"))
        boxes = _boxes(_section(top["boxes"], "boxes", BOX_KEYS))
        T_ini, N_p = int(top["T_ini"]), int(top["N_p"])
        if T_ini < 1:
            raise ConfigError(f"T_ini must be at least 1, got {T_ini}")
        N = N_p + T_ini
        if N <= 2 * T_ini:
            raise ConfigError(f"prediction horizon N = N_p + T_ini = {N} must exceed 2·T_ini = {2 * T_ini}")
        if boxes.m != plant.m or boxes.p != plant.p:
            raise ConfigError(f"boxes are {boxes.m}-in/{boxes.p}-out, plant is {plant.m}-in/{plant.p}-out")

        ds = _section(top.get("dataset"), "dataset", DATASET_KEYS)
        dataset = DatasetConfig(
            length=int(ds.get("length", 200)),
            seed=int(ds.get("seed", 0)),
            amplitude=float(ds.get("amplitude", 1.0)),
            x0=np.array(ds["x0"], dtype=float) if "x0" in ds else None,
        )
        need = min_dataset_length(plant.m, plant.p, N + T_ini)
        if dataset.length < need:
            raise ConfigError(f"dataset length {dataset.length} is below the {need} samples "
                              f"needed for L = {N + T_ini}")

        rs = _section(top.get("reach"), "reach", REACH_KEYS)
        reach = ReachConfig(N=N, T_ini=T_ini, **rs)

        ws = _section(top.get("weights"), "weights", WEIGHT_KEYS)
        weights = ControllerWeights(ws.get("Q_y", np.eye(plant.p)), ws.get("Q_u", np.eye(plant.m)))
        if weights.Q_y.shape != (plant.p, plant.p) or weights.Q_u.shape != (plant.m, plant.m):
            raise ConfigError(f"weights must be Q_y {plant.p}x{plant.p} and Q_u {plant.m}x{plant.m}")

        x0 = np.array(top["x0"], dtype=float).reshape(-1)
        if x0.shape != (plant.n,):
            raise ConfigError(f"x0 has length {x0.shape[0]}, plant order is {plant.n}")

        vs = _section(top.get("verify"), "verify", VERIFY_KEYS)
        tol = Tolerances(**{k: float(v) for k, v in
                            _section(top.get("tolerances"), "tolerances", TOLERANCE_KEYS).items()})
        return ExperimentConfig(
            plant=plant, boxes=boxes, T_ini=T_ini, N_p=N_p, dataset=dataset, reach=reach,
            weights=weights, x0=x0,
            ddpc_steps=int(top.get("ddpc_steps", 8)),
            hold_steps=int(top.get("hold_steps", 0)),
            verify_samples=int(vs.get("samples", 20)),
            verify_seed=int(vs.get("seed", 0)),
            tolerances=tol,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    try:
        cfg = parse_config(data)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None
    if seed is not None:
        cfg = cfg.with_seed(seed)
        log.debug(f"All seeds overridden with {seed}")
    return cfg
