"""Synthetic FMCW radar: point-target scenes to range-Doppler maps and CFAR target lists."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class RadarConfig:
    n_range: int = 64
    n_doppler: int = 64
    channels: int = 1
    bandwidth: float = 299_792_458.0  # Hz; c / (2B) = 0.5 m bins
    carrier: float = 77e9
    chirp_period: float = 1.2166e-4  # s
    noise_power: float = 1.0  # E|n|^2 per RD cell
    amplitude_scale: float = 1.0  # peak amplitude = scale * rcs / range^2

    @property
    def range_resolution(self) -> float:
        return SPEED_OF_LIGHT / (2 * self.bandwidth)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier

    @property
    def velocity_resolution(self) -> float:
        return self.wavelength / (2 * self.n_doppler * self.chirp_period)

    @property
    def max_range(self) -> float:
        return self.n_range * self.range_resolution

    @property
    def max_velocity(self) -> float:
        return self.n_doppler / 2 * self.velocity_resolution

    def range_bin(self, rng: float) -> float:
        return rng / self.range_resolution

    def doppler_bin(self, velocity: float) -> float:
        # zero velocity sits at the centre column; approaching targets (v > 0) on the right
        return self.n_doppler / 2 + velocity / self.velocity_resolution


@dataclass(frozen=True)
class SceneTarget:
    range: float
    radial_velocity: float
    rcs_amplitude: float
    class_id: int = 0
    object_id: int = 0
    phase: float = 0.0


@dataclass
class RDMap:
    magnitude: np.ndarray  # (C, H, W)
    frame_id: int = 0
    time_stamp: float = 0.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.magnitude.shape


@dataclass(frozen=True)
class Reflection:
    range_bin: int
    doppler_bin: int
    amplitude: float
    snr_db: float


def validate_target(t: SceneTarget, cfg: RadarConfig) -> None:
    if not 0 < t.range < cfg.max_range:
        raise ValueError(f"target range {t.range:.3f} m outside (0, {cfg.max_range:.3f}) m")
    if abs(t.radial_velocity) >= cfg.max_velocity:
        raise ValueError(f"target velocity {t.radial_velocity:.3f} m/s outside +-{cfg.max_velocity:.3f} m/s")


def peak_amplitude(t: SceneTarget, cfg: RadarConfig) -> float:
    return cfg.amplitude_scale * t.rcs_amplitude / t.range**2


def rcs_for_snr(snr_db: float, rng: float, cfg: RadarConfig) -> float:
    """RCS that gives a peak of ``snr_db`` above the noise RMS at range ``rng``."""
    amp = math.sqrt(cfg.noise_power) * 10 ** (snr_db / 20)
    return amp * rng**2 / cfg.amplitude_scale


def target_at_bins(range_bin: float, doppler_bin: float, snr_db: float, cfg: RadarConfig, **kw) -> SceneTarget:
    rng = range_bin * cfg.range_resolution
    vel = (doppler_bin - cfg.n_doppler / 2) * cfg.velocity_resolution
    return SceneTarget(range=rng, radial_velocity=vel, rcs_amplitude=rcs_for_snr(snr_db, rng, cfg), **kw)


def _window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]  # periodic-free Hann without zero endpoints


def simulate_frame(
    scene: list[SceneTarget], cfg: RadarConfig, rng_seed: int, frame_id: int = 0, time_stamp: float = 0.0
) -> RDMap:
    """Beat signal of every target, Hann-windowed 2D FFT, plus complex noise, as magnitudes."""
    for t in scene:
        validate_target(t, cfg)
    h, w = cfg.n_range, cfg.n_doppler
    win_r, win_d = _window(h), _window(w)
    n = np.arange(h)[:, None]
    m = np.arange(w)[None, :]
    beat = np.zeros((h, w), dtype=np.complex128)
    for t in scene:
        kr = cfg.range_bin(t.range)
        kd = t.radial_velocity / cfg.velocity_resolution
        beat += peak_amplitude(t, cfg) * np.exp(1j * (2 * np.pi * (kr * n / h + kd * m / w) + t.phase))
    spec = np.fft.fft2(beat * win_r[:, None] * win_d[None, :]) / (win_r.sum() * win_d.sum())
    spec = np.fft.fftshift(spec, axes=1)
    rng = np.random.default_rng(rng_seed)
    sigma = math.sqrt(cfg.noise_power / 2)
    mags = np.empty((cfg.channels, h, w))
    for c in range(cfg.channels):
        noise = rng.normal(0, sigma, (h, w)) + 1j * rng.normal(0, sigma, (h, w))
        mags[c] = np.abs(spec + noise)
    return RDMap(mags, frame_id=frame_id, time_stamp=time_stamp)


def _box_sums(integral: np.ndarray, r0, r1, c0, c1) -> np.ndarray:
    return integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]


def cfar_detect(rd: RDMap, guard: int = 1, train: int = 4, pfa: float = 1e-6) -> list[Reflection]:
    """2D cell-averaging CFAR on the first channel's power.

    Training cells are the square of half-width guard+train around the cell
    under test minus the guard square; near the edges both squares are
    clamped to the map and the threshold factor uses the surviving count.
    """
    if guard < 1 or train < 1:
        raise ValueError(f"guard and train must be >= 1, got guard={guard} train={train}")
    if not 0 < pfa < 0.5:
        raise ValueError(f"pfa must lie in (0, 0.5), got {pfa}")
    power = np.asarray(rd.magnitude[0], dtype=np.float64) ** 2
    h, w = power.shape
    span = 2 * (guard + train) + 1
    if span > h or span > w:
        raise ValueError(f"CFAR window {span}x{span} larger than map {h}x{w}")
    integ = np.zeros((h + 1, w + 1))
    integ[1:, 1:] = power.cumsum(0).cumsum(1)
    ones = np.zeros((h + 1, w + 1))
    ones[1:, 1:] = np.ones((h, w)).cumsum(0).cumsum(1)
    rows, cols = np.arange(h)[:, None], np.arange(w)[None, :]

    def bounds(half):
        return (
            np.clip(rows - half, 0, h), np.clip(rows + half + 1, 0, h),
            np.clip(cols - half, 0, w), np.clip(cols + half + 1, 0, w),
        )

    outer, inner = bounds(guard + train), bounds(guard)
    total = _box_sums(integ, *outer) - _box_sums(integ, *inner)
    count = _box_sums(ones, *outer) - _box_sums(ones, *inner)
    noise = total / count
    alpha = count * (pfa ** (-1.0 / count) - 1.0)
    hits = np.argwhere(power > alpha * noise)
    out = []
    for r, d in hits:
        snr = 10 * math.log10(power[r, d] / noise[r, d]) if noise[r, d] > 0 else math.inf
        out.append(Reflection(int(r), int(d), float(rd.magnitude[0, r, d]), float(snr)))
    return out


def step_scene(scene: list[SceneTarget], dt: float, cfg: RadarConfig) -> list[SceneTarget]:
    """Advance every target at constant radial velocity; drop those leaving the range window."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    moved = []
    for t in scene:
        r = t.range + t.radial_velocity * dt
        if 0 < r < cfg.max_range:
            moved.append(replace(t, range=r))
    return moved


# ---------------------------------------------------------------------------
# scene distribution


@dataclass(frozen=True)
class ClassPrior:
    """Scatterer layout and kinematics for one target class."""

    name: str
    snr_ref_db: tuple[float, float]  # per-scatterer peak SNR at the reference range
    speed: tuple[float, float]  # |v| in m/s
    range_scatterers: tuple[int, int]  # inclusive count along range
    range_spacing: float  # bins between scatterers along range
    doppler_offsets: tuple[float, ...]  # micro-Doppler spread in bins


DEFAULT_CLASSES = (
    ClassPrior("pedestrian", (30.0, 34.0), (0.5, 1.8), (1, 1), 1.0, (-2.0, 0.0, 2.0)),
    ClassPrior("cyclist", (32.0, 36.0), (2.0, 4.5), (2, 2), 2.0, (-1.0, 1.0)),
    ClassPrior("car", (34.0, 38.0), (3.0, 6.5), (3, 5), 1.5, (0.0,)),
)


@dataclass(frozen=True)
class SceneConfig:
    empty_prob: float = 0.15
    max_objects: int = 3
    min_range: float = 5.0
    max_range: float = 25.0
    reference_range: float = 15.0
    box_half_width: float = 1.0  # bins added around scatterer envelope for ground truth
    dt: float = 0.1
    classes: tuple[ClassPrior, ...] = field(default=DEFAULT_CLASSES)
    # a wider guard than cfar_detect's default keeps extended targets out of their own training ring
    cfar_guard: int = 3
    cfar_train: int = 4
    cfar_pfa: float = 1e-6
    radar: RadarConfig = field(default_factory=RadarConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        radar = RadarConfig(**d.pop("radar", {}))
        if "classes" in d:
            d["classes"] = tuple(
                ClassPrior(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}) for c in d["classes"]
            )
        return cls(radar=radar, **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _object_scatterers(prior: ClassPrior, class_id: int, object_id: int, rng_m: float, vel: float,
                       snr_ref: float, cfg: SceneConfig, rng: np.random.Generator) -> list[SceneTarget]:
    radar = cfg.radar
    n_r = int(rng.integers(prior.range_scatterers[0], prior.range_scatterers[1] + 1))
    out = []
    for i in range(n_r):
        r = rng_m + i * prior.range_spacing * radar.range_resolution
        for off in prior.doppler_offsets:
            v = vel + off * radar.velocity_resolution
            amp = math.sqrt(radar.noise_power) * 10 ** (snr_ref / 20) * (cfg.reference_range / r) ** 2
            rcs = amp * r**2 / radar.amplitude_scale
            out.append(SceneTarget(r, v, rcs, class_id, object_id, float(rng.uniform(0, 2 * np.pi))))
    return out


def ground_truth_boxes(scene: list[SceneTarget], cfg: SceneConfig) -> list[tuple[tuple[float, ...], int]]:
    """(x_min, y_min, x_max, y_max) in (doppler_bin, range_bin) coordinates, plus class id, per object.

    Bin i is centred on coordinate i; boxes are clipped to [0, W-1] x [0, H-1].
    """
    radar, hw = cfg.radar, cfg.box_half_width
    groups: dict[int, list[SceneTarget]] = {}
    for t in scene:
        groups.setdefault(t.object_id, []).append(t)
    boxes = []
    for oid in sorted(groups):
        ts = groups[oid]
        rb = [radar.range_bin(t.range) for t in ts]
        db = [radar.doppler_bin(t.radial_velocity) for t in ts]
        box = (
            max(min(db) - hw, 0.0), max(min(rb) - hw, 0.0),
            min(max(db) + hw, radar.n_doppler - 1.0), min(max(rb) + hw, radar.n_range - 1.0),
        )
        boxes.append((box, ts[0].class_id))
    return boxes


def _overlaps(a, b, margin: float = 1.0) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def sample_scene(cfg: SceneConfig, rng: np.random.Generator) -> list[SceneTarget]:
    """Draw 0..max_objects non-overlapping extended targets."""
    if rng.random() < cfg.empty_prob:
        return []
    n_obj = int(rng.integers(1, cfg.max_objects + 1))
    scene: list[SceneTarget] = []
    placed: list[tuple[float, ...]] = []
    radar = cfg.radar
    for oid in range(n_obj):
        for _ in range(50):
            cid = int(rng.integers(len(cfg.classes)))
            prior = cfg.classes[cid]
            r = float(rng.uniform(cfg.min_range, cfg.max_range))
            speed = float(rng.uniform(*prior.speed))
            vel = speed if rng.random() < 0.5 else -speed
            snr = float(rng.uniform(*prior.snr_ref_db))
            obj = _object_scatterers(prior, cid, oid, r, vel, snr, cfg, rng)
            if any(not (0 < t.range < radar.max_range and abs(t.radial_velocity) < radar.max_velocity) for t in obj):
                continue
            # keep clear of the boundary so one step cannot push the object out
            margin = abs(vel) * cfg.dt + radar.range_resolution
            if max(t.range for t in obj) > radar.max_range - margin:
                continue
            box = ground_truth_boxes(obj, cfg)[0][0]
            if any(_overlaps(box, b) for b in placed):
                continue
            placed.append(box)
            scene.extend(obj)
            break
    return scene
