"""Point-scatterer simulator producing paired MoCap + radar I/Q recordings.

Each marker is an isotropic unit scatterer; the baseband return is the sum
of per-marker phasors exp(-j * 4*pi * d_m(t) / lambda) (phase advances by a
full turn per half wavelength of range), plus optional complex Gaussian
noise. A target whose range is decreasing therefore lands on a positive
Doppler bin after center_shift. This module exists to verify the learning
pipeline with exactly-known physics, not to model real scattering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data as data_io
from .errors import ConfigError, DataError
from .rng import RngState
from .streams import MoCapStream, RadarSignal

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_CARRIER_HZ = 5.8e9

Trajectory = Callable[[np.ndarray], np.ndarray]  # (N,) seconds -> (N, 3) meters


def carrier_wavelength(carrier_hz: float = DEFAULT_CARRIER_HZ) -> float:
    if carrier_hz <= 0:
        raise ConfigError(f"carrier frequency must be positive, got {carrier_hz}")
    return SPEED_OF_LIGHT / carrier_hz


# -- trajectory builders ---------------------------------------------------------


def stationary(position) -> Trajectory:
    position = np.asarray(position, dtype=np.float64)

    def path(t: np.ndarray) -> np.ndarray:
        return np.broadcast_to(position, (len(t), 3)).copy()

    return path


def constant_velocity(start, velocity) -> Trajectory:
    start = np.asarray(start, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)

    def path(t: np.ndarray) -> np.ndarray:
        return start + np.outer(t, velocity)

    return path


def oscillating(anchor, axis, amplitude_m: float, rate_hz: float, phase: float = 0.0) -> Trajectory:
    """Sinusoidal swing along `axis` about an anchor point or trajectory.

    Radial velocity seen from a radar along `axis` peaks at
    2*pi*rate_hz*amplitude_m, which makes the micro-Doppler extent of the
    return analytically known.
    """
    base = anchor if callable(anchor) else stationary(anchor)
    axis = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if norm == 0:
        raise ConfigError("oscillation axis must be nonzero")
    axis = axis / norm

    def path(t: np.ndarray) -> np.ndarray:
        swing = amplitude_m * np.sin(2.0 * np.pi * rate_hz * t + phase)
        return base(t) + np.outer(swing, axis)

    return path


@dataclass
class ScattererScene:
    """Marker trajectories plus the radar geometry and noise level."""

    trajectories: tuple[Trajectory, ...]
    radar_position: np.ndarray
    amplitudes: np.ndarray | None = None
    wavelength: float = field(default_factory=carrier_wavelength)
    noise_std: float = 0.0
    marker_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.trajectories = tuple(self.trajectories)
        if not self.trajectories:
            raise ConfigError("scene needs at least one marker trajectory")
        self.radar_position = np.asarray(self.radar_position, dtype=np.float64).reshape(3)
        if self.amplitudes is None:
            self.amplitudes = np.ones(len(self.trajectories))
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        if len(self.amplitudes) != len(self.trajectories):
            raise ConfigError(
                f"{len(self.amplitudes)} amplitudes for {len(self.trajectories)} trajectories"
            )
        if np.any(self.amplitudes < 0):
            raise ConfigError("scatterer amplitudes must be >= 0")
        if self.wavelength <= 0:
            raise ConfigError(f"wavelength must be positive, got {self.wavelength}")
        if self.noise_std < 0:
            raise ConfigError(f"noise std must be >= 0, got {self.noise_std}")
        if self.marker_names is not None and len(self.marker_names) != len(self.trajectories):
            raise ConfigError("marker_names length must match trajectories")

    @property
    def n_markers(self) -> int:
        return len(self.trajectories)

    def positions(self, t: np.ndarray) -> np.ndarray:
        """Sample all trajectories: (N,) seconds -> (N, M, 3) meters."""
        cols = [path(t) for path in self.trajectories]
        out = np.stack(cols, axis=1)
        if not np.all(np.isfinite(out)):
            raise DataError("a trajectory produced non-finite positions")
        return out


def simulate(scene: ScattererScene, duration_s: float,
             mocap_rate: float = 250.0, radar_rate: float = 256.0,
             seed: int = 0) -> tuple[MoCapStream, RadarSignal]:
    """Sample marker positions at mocap_rate and the baseband return at
    radar_rate over [0, duration_s); both streams share the t=0 epoch."""
    if duration_s < 1.0 / radar_rate:
        raise DataError(
            f"duration {duration_s} s is shorter than one radar sample ({1.0 / radar_rate} s)"
        )
    n_mocap = int(round(duration_s * mocap_rate))
    n_radar = int(round(duration_s * radar_rate))
    t_mocap = np.arange(n_mocap) / mocap_rate
    t_radar = np.arange(n_radar) / radar_rate

    positions_m = scene.positions(t_mocap)
    mocap = MoCapStream(t_mocap, positions_m, scene.marker_names)

    positions_r = scene.positions(t_radar)  # (N, M, 3)
    ranges = np.linalg.norm(positions_r - scene.radar_position, axis=2)
    phases = -4.0 * np.pi * ranges / scene.wavelength
    iq = (scene.amplitudes * np.exp(1j * phases)).sum(axis=1)
    if scene.noise_std > 0:
        gen = RngState(seed).gen
        noise = gen.standard_normal(n_radar) + 1j * gen.standard_normal(n_radar)
        iq = iq + scene.noise_std / np.sqrt(2.0) * noise  # E|noise|^2 == noise_std^2
    carrier = SPEED_OF_LIGHT / scene.wavelength
    return mocap, RadarSignal(t_radar, iq, carrier_hz=carrier)


# -- builtin scene families --------------------------------------------------------

#: Gait marker layout: (name, height above floor, swing amplitude, phase offset).
#: Swing is along the walking axis at half the step rate; wrists counter-swing.
_GAIT_MARKERS = (
    ("torso", 1.00, 0.00, 0.0),
    ("head", 1.60, 0.00, 0.0),
    ("l_ankle", 0.12, 0.25, 0.0),
    ("r_ankle", 0.12, 0.25, np.pi),
    ("l_knee", 0.55, 0.10, 0.0),
    ("r_knee", 0.55, 0.10, np.pi),
    ("l_wrist", 0.95, 0.15, np.pi),
    ("r_wrist", 0.95, 0.15, 0.0),
)


def stationary_scene(n_markers: int = 3, noise_std: float = 0.0) -> ScattererScene:
    """Fixed markers: all return energy stays in the zero-Doppler bin."""
    positions = [np.array([3.0 + 0.2 * i, 0.1 * i, 1.0]) for i in range(n_markers)]
    return ScattererScene(
        trajectories=tuple(stationary(p) for p in positions),
        radar_position=np.zeros(3),
        noise_std=noise_std,
        marker_names=tuple(f"m{i:02d}" for i in range(n_markers)),
    )


def constant_velocity_scene(speed_mps: float = 1.0, start_range_m: float = 6.0,
                            noise_std: float = 0.0) -> ScattererScene:
    """One marker closing range at speed_mps (positive = approaching)."""
    return ScattererScene(
        trajectories=(constant_velocity([start_range_m, 0.0, 1.0], [-speed_mps, 0.0, 0.0]),),
        radar_position=np.array([0.0, 0.0, 1.0]),
        noise_std=noise_std,
        marker_names=("target",),
    )


def pendulum_scene(swing_amplitude_m: float = 0.2, swing_rate_hz: float = 1.5,
                   range_m: float = 4.0, noise_std: float = 0.0) -> ScattererScene:
    """One marker oscillating along the line of sight; micro-Doppler support
    spans +-2*(2*pi*rate*amplitude)/wavelength."""
    return ScattererScene(
        trajectories=(oscillating([range_m, 0.0, 1.0], [1.0, 0.0, 0.0],
                                  swing_amplitude_m, swing_rate_hz),),
        radar_position=np.array([0.0, 0.0, 1.0]),
        noise_std=noise_std,
        marker_names=("limb",),
    )


def gait_scene(n_markers: int = 8, speed_mps: float = 1.0, step_rate_hz: float = 2.0,
               start_range_m: float = 9.0, noise_std: float = 0.0) -> ScattererScene:
    """Walking target: torso plus swinging limbs, approaching the radar.

    step_rate_hz is the repetition rate of the spectrogram pattern (two
    steps per full left/right gait cycle, so legs swing at step_rate/2).
    """
    if not (1 <= n_markers <= len(_GAIT_MARKERS)):
        raise ConfigError(f"gait scene supports 1..{len(_GAIT_MARKERS)} markers, got {n_markers}")
    swing_rate = step_rate_hz / 2.0
    walk_axis = np.array([1.0, 0.0, 0.0])
    names = []
    paths = []
    for name, height, amplitude, phase in _GAIT_MARKERS[:n_markers]:
        base = constant_velocity([start_range_m, 0.0, height], [-speed_mps, 0.0, 0.0])
        if amplitude > 0:
            paths.append(oscillating(base, walk_axis, amplitude, swing_rate, phase))
        else:
            # Torso and head bob vertically once per step.
            paths.append(oscillating(base, [0.0, 0.0, 1.0], 0.02, step_rate_hz))
        names.append(name)
    return ScattererScene(
        trajectories=tuple(paths),
        radar_position=np.array([0.0, 0.0, 1.0]),
        noise_std=noise_std,
        marker_names=tuple(names),
    )


_SCENE_BUILDERS = {
    "stationary": stationary_scene,
    "constant_velocity": constant_velocity_scene,
    "pendulum": pendulum_scene,
    "gait": gait_scene,
}

_RECIPE_KEYS = {"scene", "duration_s", "noise_std", "mocap_rate", "radar_rate", "params"}


def resolve_recipe(recipe) -> dict:
    """Normalize a recipe (builtin name, dict, or JSON file path) to a dict."""
    if isinstance(recipe, (str, Path)):
        path = Path(recipe)
        if path.suffix == ".json" or path.exists():
            try:
                recipe = json.loads(path.read_text(encoding="utf-8"))
            except OSError as exc:
                raise DataError(f"cannot read recipe file {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: recipe is not valid JSON: {exc}") from exc
        else:
            recipe = {"scene": str(recipe)}
    if not isinstance(recipe, dict):
        raise ConfigError(f"recipe must be a name, dict, or JSON file, got {type(recipe)}")
    unknown = set(recipe) - _RECIPE_KEYS
    if unknown:
        raise ConfigError(f"unknown recipe keys {sorted(unknown)}; allowed: {sorted(_RECIPE_KEYS)}")
    scene = recipe.get("scene")
    if scene not in _SCENE_BUILDERS:
        raise ConfigError(
            f"unknown scene family {scene!r}; builtins: {sorted(_SCENE_BUILDERS)}"
        )
    return {
        "scene": scene,
        "duration_s": float(recipe.get("duration_s", 8.0)),
        "noise_std": float(recipe.get("noise_std", 0.0)),
        "mocap_rate": float(recipe.get("mocap_rate", 250.0)),
        "radar_rate": float(recipe.get("radar_rate", 256.0)),
        "params": dict(recipe.get("params", {})),
    }


def build_scene(resolved: dict) -> ScattererScene:
    builder = _SCENE_BUILDERS[resolved["scene"]]
    try:
        return builder(noise_std=resolved["noise_std"], **resolved["params"])
    except TypeError as exc:
        raise ConfigError(f"bad params for scene {resolved['scene']!r}: {exc}") from exc


def make_dataset(recipe, n_trials: int, seed: int, out_dir) -> Path:
    """Simulate n_trials independent paired recordings and write them in the
    data_io text formats plus a manifest with per-trial seeds.

    The per-trial seed is seed + index; the same (recipe, seed) always
    produces bit-identical files.
    """
    if n_trials < 1:
        raise ConfigError(f"n_trials must be >= 1, got {n_trials}")
    resolved = resolve_recipe(recipe)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    trials = []
    for i in range(n_trials):
        trial_seed = seed + i
        scene = build_scene(resolved)
        mocap, radar = simulate(scene, resolved["duration_s"],
                                mocap_rate=resolved["mocap_rate"],
                                radar_rate=resolved["radar_rate"], seed=trial_seed)
        mocap_name = f"mocap_{i:03d}.csv"
        radar_name = f"radar_{i:03d}.csv"
        data_io.save_mocap(mocap, out_dir / mocap_name, rate_hz=resolved["mocap_rate"])
        data_io.save_radar(radar, out_dir / radar_name, rate_hz=resolved["radar_rate"])
        trials.append({
            "index": i, "seed": trial_seed,
            "mocap": mocap_name, "radar": radar_name,
            "sync_mocap_s": 0.0, "sync_radar_s": 0.0,
        })

    manifest = {
        "format_version": 1,
        "recipe": resolved,
        "base_seed": seed,
        "trials": trials,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return manifest_path
