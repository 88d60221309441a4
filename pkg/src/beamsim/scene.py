"""Scene description: talker trajectory, listener head, noise field, seeds.

A ``SceneConfig`` fully determines a render, including every random
stream, so identical configs produce bit-identical recordings.  Configs
round-trip through plain JSON; ``SceneConfig.validate`` reports all
violations at once.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from beamsim.errors import ConfigError
from beamsim.headmodel import DEFAULT_HEAD_RADIUS_M, SPEED_OF_SOUND_MPS, HeadModel

MAX_ROTATION_REV_PER_S = 0.4
_STATIONARY_DEFAULT_DURATION_S = 10.0


def substream(master_seed: int, *labels) -> np.random.Generator:
    """Deterministic named RNG substream of ``master_seed``.

    Labels are hashed into the SeedSequence spawn key, so streams are
    independent of each other and of the order they are created in.
    """
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy=master_seed, spawn_key=key))


def derived_seed(master_seed: int, *labels) -> int:
    """A plain integer seed derived from a labeled substream (for manifests)."""
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    return int(np.random.SeedSequence(entropy=master_seed, spawn_key=key).generate_state(1)[0])


@dataclass(frozen=True)
class Trajectory:
    """Talker head orientation over time, in degrees relative to facing the
    listener (0 = facing, positive counterclockwise)."""

    kind: str = "stationary"  # "stationary" | "constant_rotation"
    start_deg: float = -90.0
    end_deg: float = 90.0
    speed_rev_per_s: float = 0.0

    def problems(self, prefix="trajectory"):
        out = []
        if self.kind not in ("stationary", "constant_rotation"):
            out.append(f"{prefix}.kind must be 'stationary' or 'constant_rotation', got {self.kind!r}")
            return out
        if self.kind == "stationary" and self.speed_rev_per_s != 0.0:
            out.append(f"{prefix}: stationary requires speed_rev_per_s = 0")
        if self.kind == "constant_rotation":
            if not 0.0 < self.speed_rev_per_s <= MAX_ROTATION_REV_PER_S:
                out.append(
                    f"{prefix}.speed_rev_per_s must be in (0, {MAX_ROTATION_REV_PER_S}], "
                    f"got {self.speed_rev_per_s}"
                )
            if self.end_deg == self.start_deg:
                out.append(f"{prefix}: rotation needs end_deg != start_deg")
        return out

    def rotation_time_s(self) -> float:
        """Time to traverse the arc (0 for stationary)."""
        if self.kind == "stationary":
            return 0.0
        return abs(self.end_deg - self.start_deg) / (360.0 * self.speed_rev_per_s)


def orientation_at(trajectory: Trajectory, t_s):
    """Orientation in degrees at time ``t_s``; clamps at end_deg after arrival."""
    t = np.asarray(t_s, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("time must be non-negative")
    if trajectory.kind == "stationary":
        out = np.broadcast_to(np.float64(trajectory.start_deg), t.shape).copy()
        return out if out.ndim else float(out)
    rate = 360.0 * trajectory.speed_rev_per_s
    direction = 1.0 if trajectory.end_deg >= trajectory.start_deg else -1.0
    raw = trajectory.start_deg + direction * rate * t
    lo, hi = sorted((trajectory.start_deg, trajectory.end_deg))
    out = np.clip(raw, lo, hi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DirectivityModel:
    """Per-octave-band cardioid mix; betas must rise with frequency."""

    band_centers_hz: tuple = (500.0, 2000.0, 8000.0)
    betas: tuple = (0.3, 0.6, 0.85)

    def problems(self, prefix="directivity"):
        out = []
        if len(self.band_centers_hz) != len(self.betas) or not self.band_centers_hz:
            out.append(f"{prefix}: band_centers_hz and betas must be equal-length and non-empty")
            return out
        if any(b < 0 or b > 1 for b in self.betas):
            out.append(f"{prefix}: betas must lie in [0, 1]")
        if list(self.band_centers_hz) != sorted(self.band_centers_hz):
            out.append(f"{prefix}: band_centers_hz must be ascending")
        if list(self.betas) != sorted(self.betas):
            out.append(f"{prefix}: betas must be non-decreasing (higher bands more directional)")
        return out


@dataclass(frozen=True)
class HeadConfig:
    radius_m: float = DEFAULT_HEAD_RADIUS_M
    ear_axis_deg: float = 90.0
    shadow: bool = True

    def model(self, c_mps=SPEED_OF_SOUND_MPS) -> HeadModel:
        return HeadModel(radius_m=self.radius_m, c_mps=c_mps, shadow=self.shadow)

    def problems(self, prefix="listener_head"):
        out = []
        if self.radius_m <= 0:
            out.append(f"{prefix}.radius_m must be positive")
        if self.ear_axis_deg != 90.0:
            out.append(f"{prefix}.ear_axis_deg is fixed at +/-90 in this model")
        return out


@dataclass(frozen=True)
class TalkerConfig:
    azimuth_deg: float = 0.0
    distance_m: float = 1.0
    trajectory: Trajectory = field(default_factory=Trajectory)
    directivity: DirectivityModel = field(default_factory=DirectivityModel)
    # mouth sits ahead of the turntable axis, so rotation sweeps the source
    mouth_offset_m: float = 0.09

    def problems(self, prefix="talker"):
        out = []
        if self.distance_m <= 0:
            out.append(f"{prefix}.distance_m must be positive")
        if not 0.0 <= self.mouth_offset_m < self.distance_m:
            out.append(f"{prefix}.mouth_offset_m must be in [0, distance_m)")
        out += self.trajectory.problems(f"{prefix}.trajectory")
        out += self.directivity.problems(f"{prefix}.directivity")
        return out


@dataclass(frozen=True)
class NoiseSourceConfig:
    azimuth_deg: float
    distance_m: float = 2.0
    seed: int = 0

    def problems(self, prefix="noise_source"):
        if self.distance_m <= 0:
            return [f"{prefix}.distance_m must be positive"]
        return []


@dataclass(frozen=True)
class ReverbConfig:
    """Sparse directional echo field of the treated recording room."""

    enabled: bool = False
    t60_s: float = 0.15
    density_per_s: float = 200.0  # echo paths per second of tail

    def problems(self, prefix="reverb"):
        out = []
        if self.t60_s <= 0:
            out.append(f"{prefix}.t60_s must be positive")
        if self.density_per_s <= 0:
            out.append(f"{prefix}.density_per_s must be positive")
        return out


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to reproduce one simulated recording session."""

    listener_head: HeadConfig = field(default_factory=HeadConfig)
    talker: TalkerConfig = field(default_factory=TalkerConfig)
    noise_sources: tuple = ()
    ambient_snr_db: float | None = 23.2  # None disables the ambient floor
    sample_rate: int = 48_000
    duration_s: float | None = None  # None: rotation time, or 10 s if stationary
    master_seed: int = 12345
    reverb: ReverbConfig = field(default_factory=ReverbConfig)
    c_mps: float = SPEED_OF_SOUND_MPS

    def problems(self):
        out = []
        out += self.listener_head.problems()
        out += self.talker.problems()
        for i, src in enumerate(self.noise_sources):
            out += src.problems(f"noise_sources[{i}]")
        out += self.reverb.problems()
        if self.sample_rate <= 0:
            out.append("sample_rate must be positive")
        if self.c_mps <= 0:
            out.append("c_mps must be positive")
        if self.duration_s is not None:
            if self.duration_s <= 0:
                out.append("duration_s must be positive")
            elif self.duration_s < self.talker.trajectory.rotation_time_s():
                out.append(
                    f"duration_s = {self.duration_s} does not cover the trajectory "
                    f"({self.talker.trajectory.rotation_time_s():.3f} s)"
                )
        return out

    def validate(self) -> "SceneConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def resolved_duration_s(self) -> float:
        if self.duration_s is not None:
            return float(self.duration_s)
        rot = self.talker.trajectory.rotation_time_s()
        return rot if rot > 0 else _STATIONARY_DEFAULT_DURATION_S

    @property
    def n_samples(self) -> int:
        return int(round(self.resolved_duration_s() * self.sample_rate))

    def head_model(self) -> HeadModel:
        return self.listener_head.model(self.c_mps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_sources"] = [asdict(s) for s in self.noise_sources]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)


def default_noise_sources(master_seed: int, azimuths_deg=(45.0, 135.0, -135.0, -45.0),
                          distance_m=2.0) -> tuple:
    """Corner-loudspeaker layout with seeds derived from the master seed."""
    return tuple(
        NoiseSourceConfig(azimuth_deg=az, distance_m=distance_m,
                          seed=derived_seed(master_seed, "noise_source", i))
        for i, az in enumerate(azimuths_deg)
    )


def scene_from_dict(d: dict) -> SceneConfig:
    """Build and validate a SceneConfig from parsed JSON."""
    problems = []
    if not isinstance(d, dict):
        raise ConfigError("scene config must be a JSON object")

    def sub(cls, key, default):
        val = d.get(key)
        if val is None:
            return default
        if not isinstance(val, dict):
            problems.append(f"{key} must be an object")
            return default
        try:
            return cls(**val)
        except TypeError as exc:
            problems.append(f"{key}: {exc}")
            return default

    head = sub(HeadConfig, "listener_head", HeadConfig())
    reverb = sub(ReverbConfig, "reverb", ReverbConfig())

    talker_d = dict(d.get("talker", {}))
    if "trajectory" in talker_d:
        try:
            talker_d["trajectory"] = Trajectory(**talker_d["trajectory"])
        except TypeError as exc:
            problems.append(f"talker.trajectory: {exc}")
            talker_d.pop("trajectory")
    if "directivity" in talker_d:
        try:
            dv = dict(talker_d["directivity"])
            dv["band_centers_hz"] = tuple(dv.get("band_centers_hz", (500.0, 2000.0, 8000.0)))
            dv["betas"] = tuple(dv.get("betas", (0.3, 0.6, 0.85)))
            talker_d["directivity"] = DirectivityModel(**dv)
        except TypeError as exc:
            problems.append(f"talker.directivity: {exc}")
            talker_d.pop("directivity")
    try:
        talker = TalkerConfig(**talker_d)
    except TypeError as exc:
        problems.append(f"talker: {exc}")
        talker = TalkerConfig()

    sources = []
    for i, s in enumerate(d.get("noise_sources", [])):
        try:
            sources.append(NoiseSourceConfig(**s))
        except TypeError as exc:
            problems.append(f"noise_sources[{i}]: {exc}")

    known = {"listener_head", "talker", "noise_sources", "ambient_snr_db", "sample_rate",
             "duration_s", "master_seed", "reverb", "c_mps"}
    for key in d:
        if key not in known:
            problems.append(f"unknown scene config key: {key!r}")
    if problems:
        raise ConfigError(problems)

    scene = SceneConfig(
        listener_head=head,
        talker=talker,
        noise_sources=tuple(sources),
        ambient_snr_db=d.get("ambient_snr_db", 23.2),
        sample_rate=int(d.get("sample_rate", 48_000)),
        duration_s=d.get("duration_s"),
        master_seed=int(d.get("master_seed", 12345)),
        reverb=reverb,
        c_mps=float(d.get("c_mps", SPEED_OF_SOUND_MPS)),
    )
    return scene.validate()
