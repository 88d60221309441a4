"""Binaural rendering of the simulated recording session.

The talker rotates in place on its turntable.  Its mouth sits ahead of
the rotation axis (``mouth_offset_m``), so rotating the head also sweeps
the acoustic source along a small arc, exactly as the physical device
does.  Each source reaches the ears through a direct path and, when the
room model is enabled, a frozen set of sparse echo paths:

* direct path: per-ear directivity (angle between the facing direction
  and the talker-to-ear direction) x 1/distance spreading x propagation
  delay +/- half the Woodworth ITD (31-tap windowed-sinc fractional
  delay) x spherical head-shadow filter;
* echo paths: departure-angle directivity x signed amplitude with
  T60-governed exponential decay x arrival-angle listener chain (ITD and
  shadow), with path lengths responding to the instantaneous mouth
  position.  Moving the mouth by a fraction of a wavelength re-phases
  the whole reflected field, which is what breaks high-frequency RTF
  tracking as soon as the talker moves.

Time variation is realized block-wise: the composite frequency response
is updated every 10 ms (one STFT hop) and applied to 20 ms triangular-
windowed blocks at 50% overlap, linearly crossfading consecutive block
filters.  Stationary sources collapse to a one-shot convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from beamsim.audio import AudioBuffer, StftParams, _n_frames_for
from beamsim.errors import BeamsimError
from beamsim.headmodel import LEFT, RIGHT, directivity_gain
from beamsim.scene import SceneConfig, Trajectory, orientation_at, substream

SOURCE_STD = 0.05  # white-noise source amplitude, keeps mixtures inside [-1, 1]
_KERNEL_TAPS = 31
_KERNEL_CENTER = _KERNEL_TAPS // 2
_BASE_MARGIN = 18          # samples of guard between buffer start and first arrival
_ECHO_MIN_DELAY_S = 0.002
_ECHO_SPAN = 0.4           # echoes drawn over [min, span * t60]; later tail is -24 dB down
_ECHO_DRR_DB = 3.0         # direct-to-reverberant energy ratio at the listener


@dataclass(frozen=True)
class TransferFunctionTrack:
    """Ground-truth source-to-ear transfer on the STFT grid.

    ``gains`` is [frames x bins x 2] complex: the exact frequency response
    (direct path plus any echo field) the renderer applied around each
    frame's center time.
    """

    gains: np.ndarray
    frame_times_s: np.ndarray
    bin_freqs_hz: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.gains.shape[0]

    def rtf(self) -> np.ndarray:
        """Relative transfer function h = gains / gains[..., 0]; h[..., 0] = 1."""
        ref = self.gains[..., :1]
        safe = np.where(np.abs(ref) < 1e-300, 1e-300, ref)  # guard exact zeros
        return self.gains / safe


@dataclass(frozen=True)
class RecordingSet:
    """The three per-scenario recordings plus clean parts and ground truth.

    ``target_takes[i] = target_render + ambient_i``; the natural mixture is
    the sample-level superposition of both clean renders with its own
    ambient realization, mimicking a simultaneous recording.
    """

    target_takes: tuple
    noise_only: AudioBuffer
    natural_mixture: AudioBuffer
    target_render: AudioBuffer
    noise_render: AudioBuffer
    ground_truth: TransferFunctionTrack
    ambient_std: float
    scene: SceneConfig


@dataclass(frozen=True)
class _EchoSet:
    departure_unit: np.ndarray   # [J x 2] world direction of the first leg
    arrival_az_deg: np.ndarray   # [J] incoming direction at the listener
    delay_s: np.ndarray          # [J] total path time ex listener ear offsets
    amplitude: np.ndarray        # [J] signed absolute amplitude at the ears


def _draw_echoes(scene: SceneConfig, distance_m: float, label: str) -> _EchoSet | None:
    """Frozen sparse echo field for one source, seeded by the scene."""
    cfg = scene.reverb
    if not cfg.enabled:
        return None
    rng = substream(scene.master_seed, "echoes", label)
    count = max(1, int(round(cfg.density_per_s * cfg.t60_s)))
    dep_angle = rng.uniform(-np.pi, np.pi, size=count)
    dep = np.stack([np.cos(dep_angle), np.sin(dep_angle)], axis=1)
    arrival = rng.uniform(-180.0, 180.0, size=count)
    extra = rng.uniform(_ECHO_MIN_DELAY_S, _ECHO_SPAN * cfg.t60_s, size=count)
    amp = rng.choice([-1.0, 1.0], size=count) * np.exp(-6.907755 * extra / cfg.t60_s)
    # echo energy at the ears sits _ECHO_DRR_DB below the direct path
    target = (1.0 / distance_m) ** 2 * 10.0 ** (-_ECHO_DRR_DB / 10.0)
    amp *= np.sqrt(target / np.sum(amp**2))
    delay = distance_m / scene.c_mps + extra
    return _EchoSet(dep, arrival, delay, amp)


class _GridCache:
    """Frequency-grid constants of one renderer: tap basis, echo statics."""

    def __init__(self, renderer: "_SourceRenderer", freqs: np.ndarray, base: int):
        self.freqs = freqs
        self.base = base
        self.omega = 2.0 * np.pi * freqs
        self.beta = renderer._beta(freqs)
        # DTFT basis of the fractional-delay taps, bulk placement removed
        self.tap_basis = np.exp(
            -1j * self.omega[:, None] * (np.arange(_KERNEL_TAPS) - _KERNEL_CENTER)
            / renderer.fs
        )
        e = renderer.echoes
        if e is not None:
            self.echo_static = []
            for ear, sgn in ((LEFT, -0.5), (RIGHT, 0.5)):
                delays = (e.delay_s + sgn * renderer.head.itd_seconds(e.arrival_az_deg)
                          - base / renderer.fs)
                phase = np.exp(-1j * np.outer(delays, self.omega))
                shadow = renderer.head.shadow_gain(e.arrival_az_deg[:, None], ear,
                                                   freqs[None, :])
                self.echo_static.append(e.amplitude[:, None] * shadow * phase)


class _SourceRenderer:
    """Geometry, echo field and per-time frequency responses of one source."""

    def __init__(self, scene: SceneConfig, azimuth_deg: float, distance_m: float,
                 label: str, directivity=None, trajectory: Trajectory | None = None,
                 mouth_offset_m: float = 0.0):
        self.scene = scene
        self.head = scene.head_model()
        self.fs = scene.sample_rate
        self.c = scene.c_mps
        self.directivity = directivity
        self.trajectory = trajectory or Trajectory(kind="stationary", start_deg=0.0,
                                                   end_deg=0.0, speed_rev_per_s=0.0)
        self.mouth_offset = mouth_offset_m
        az = np.deg2rad(azimuth_deg)
        self.center = distance_m * np.array([np.cos(az), np.sin(az)])
        self.facing_listener_angle = np.arctan2(-self.center[1], -self.center[0])
        self.ears = np.stack([self.head.ear_position_m(LEFT),
                              self.head.ear_position_m(RIGHT)])
        self.echoes = _draw_echoes(scene, distance_m, label)
        self.moving = self.trajectory.kind == "constant_rotation"

    # --- geometry ---------------------------------------------------------

    def _facing(self, t):
        phi = np.deg2rad(orientation_at(self.trajectory, t))
        angle = self.facing_listener_angle + phi
        return np.stack([np.cos(angle), np.sin(angle)], axis=-1)  # [..., 2]

    def _mouth(self, t):
        return self.center + self.mouth_offset * self._facing(t)

    def _beta(self, freqs):
        if self.directivity is None:
            return np.zeros_like(freqs)
        return 1.0 - directivity_gain(0.0, freqs, self.directivity.band_centers_hz,
                                      self.directivity.betas)

    def delay_bounds_s(self):
        """(min, max) of every path delay over the whole trajectory."""
        t = np.linspace(0.0, self.scene.resolved_duration_s(), 128)
        mouth = self._mouth(t)  # [T, 2]
        r = np.linalg.norm(mouth, axis=-1)
        az = np.degrees(np.arctan2(mouth[:, 1], mouth[:, 0]))
        itd = self.head.itd_seconds(az)
        direct = np.concatenate([r / self.c - itd / 2, r / self.c + itd / 2])
        lo, hi = float(direct.min()), float(direct.max())
        if self.echoes is not None:
            e = self.echoes
            mod = (mouth - self.center) @ e.departure_unit.T / self.c  # [T, J]
            itd_e = self.head.itd_seconds(e.arrival_az_deg)
            for sgn in (-0.5, 0.5):
                d = e.delay_s[None, :] + sgn * itd_e[None, :] - mod
                lo = min(lo, float(d.min()))
                hi = max(hi, float(d.max()))
        return lo, hi

    # --- frequency response -------------------------------------------------

    def response_rel(self, t: float, cache: _GridCache) -> np.ndarray:
        """[2 x F] response at time ``t``, relative to ``cache.base`` samples
        of bulk delay (applied by the caller as an integer offset)."""
        mouth = self._mouth(t)
        facing = self._facing(t)
        r = float(np.linalg.norm(mouth))
        az = float(np.degrees(np.arctan2(mouth[1], mouth[0])))
        itd = self.head.itd_seconds(az)
        beta = cache.beta
        freqs = cache.freqs

        if self.echoes is not None:
            e = self.echoes
            g_echo = ((1.0 - beta)[None, :]
                      + beta[None, :] * (e.departure_unit @ facing)[:, None])
            mod = e.departure_unit @ (mouth - self.center) / self.c  # [J]
            wiggle = np.exp(1j * np.outer(mod, cache.omega))

        out = np.empty((2, freqs.shape[0]), dtype=np.complex128)
        for ear, sgn in ((LEFT, -0.5), (RIGHT, 0.5)):
            vec = self.ears[ear] - mouth
            dist = float(np.hypot(*vec))
            cos_rel = float(facing @ (vec / dist))
            gain = (1.0 - beta) + beta * cos_rel
            delay = (r / self.c + sgn * itd) * self.fs - cache.base
            n_int = int(np.floor(delay))
            kernel = _frac_delay_kernel(delay - n_int)
            shift = np.exp(-1j * cache.omega * (n_int / self.fs))
            resp = (gain * (cache.tap_basis @ kernel) * shift
                    * self.head.shadow_gain(az, ear, freqs) / dist)
            if self.echoes is not None:
                resp = resp + np.einsum("jf,jf->f", g_echo,
                                        cache.echo_static[ear] * wiggle)
            out[ear] = resp
        return out

    # --- rendering ----------------------------------------------------------

    def render(self, signal: np.ndarray) -> np.ndarray:
        n = signal.shape[0]
        params = StftParams()
        hop, frame = params.hop, params.frame_len
        lo, hi = self.delay_bounds_s()
        base = int(np.floor(lo * self.fs)) - _BASE_MARGIN
        span = int(np.ceil(hi * self.fs)) - base + 2 * _KERNEL_TAPS + 64
        offset = frame  # guard region for small negative placements

        if not self.moving:
            # constant response: plain overlap-add with long input segments
            nfft = 1 << int(np.ceil(np.log2(max(2 * span, 4096))))
            seg_hop = nfft - span
            cache = _GridCache(self, np.fft.rfftfreq(nfft, 1.0 / self.fs), base)
            resp = self.response_rel(0.0, cache)
            out = np.zeros((2, offset + max(base, 0) + n + nfft))
            for b in range(int(np.ceil(n / seg_hop))):
                seg = signal[b * seg_hop : (b + 1) * seg_hop]
                spec = np.fft.rfft(seg, nfft)
                pos = offset + base + b * seg_hop
                for ear in (LEFT, RIGHT):
                    out[ear, pos : pos + nfft] += np.fft.irfft(spec * resp[ear], nfft)
        else:
            nfft = 1 << int(np.ceil(np.log2(frame + span)))
            cache = _GridCache(self, np.fft.rfftfreq(nfft, 1.0 / self.fs), base)
            window = _tri_window(frame)
            n_blocks = int(np.ceil(n / hop)) + 1
            padded = np.zeros((n_blocks - 1) * hop + frame)
            padded[hop : hop + n] = signal
            duration = n / self.fs
            out = np.zeros((2, offset + max(base, 0) + n + nfft + hop))
            for b in range(n_blocks):
                seg = padded[b * hop : b * hop + frame] * window
                if not seg.any():
                    continue
                spec = np.fft.rfft(seg, nfft)
                t_b = min(max(b * hop / self.fs, 0.0), duration)
                resp = self.response_rel(t_b, cache)
                pos = offset + (b - 1) * hop + base
                for ear in (LEFT, RIGHT):
                    out[ear, pos : pos + nfft] += np.fft.irfft(spec * resp[ear], nfft)
        return out[:, offset : offset + n]

    def track_gains(self, frame_times: np.ndarray, freqs: np.ndarray) -> np.ndarray:
        """Absolute transfer at the given times, [frames x bins x 2]."""
        duration = self.scene.resolved_duration_s()
        cache = _GridCache(self, freqs, 0)
        gains = np.empty((frame_times.shape[0], freqs.shape[0], 2), dtype=np.complex128)
        clamped = np.clip(frame_times, 0.0, duration)
        if not self.moving:
            gains[:] = self.response_rel(0.0, cache).T[None, :, :]
            return gains
        for k, t in enumerate(clamped):
            gains[k] = self.response_rel(float(t), cache).T
        return gains


def _frac_delay_kernel(mu: float) -> np.ndarray:
    """Windowed-sinc FIR delaying by (center + mu) samples, unity DC gain."""
    j = np.arange(_KERNEL_TAPS)
    h = np.sinc(j - (_KERNEL_CENTER + mu)) * np.blackman(_KERNEL_TAPS)
    return h / h.sum()


def _tri_window(frame_len: int) -> np.ndarray:
    hop = frame_len // 2
    n = np.arange(frame_len)
    return np.where(n < hop, n / hop, (frame_len - n) / hop)


def _renderer_for_talker(scene: SceneConfig) -> _SourceRenderer:
    talker = scene.talker
    return _SourceRenderer(
        scene, talker.azimuth_deg, talker.distance_m, "talker",
        directivity=talker.directivity, trajectory=talker.trajectory,
        mouth_offset_m=talker.mouth_offset_m,
    )


def render_moving_talker(scene: SceneConfig, source_signal: np.ndarray):
    """Render the talker through both ears of the listener.

    Returns the binaural buffer and the ground-truth transfer track sampled
    at STFT frame centers.
    """
    scene.validate()
    signal = np.asarray(source_signal, dtype=np.float64)
    if signal.ndim != 1:
        raise BeamsimError("source_signal must be 1-D")
    if signal.shape[0] != scene.n_samples:
        raise BeamsimError(
            f"source_signal length {signal.shape[0]} does not match scene duration "
            f"({scene.n_samples} samples)"
        )
    if not np.all(np.isfinite(signal)):
        raise BeamsimError("source_signal contains non-finite values")

    renderer = _renderer_for_talker(scene)
    rendered = renderer.render(signal)

    params = StftParams()
    n_frames = _n_frames_for(scene.n_samples, params)
    times = params.frame_center_s(np.arange(n_frames), scene.sample_rate)
    gains = renderer.track_gains(times, params.bin_freqs_hz(scene.sample_rate))
    track = TransferFunctionTrack(gains, np.asarray(times),
                                  params.bin_freqs_hz(scene.sample_rate))
    return AudioBuffer(rendered, scene.sample_rate), track


def render_diffuse_noise(scene: SceneConfig) -> AudioBuffer:
    """Sum of independently seeded white-noise sources, each rendered through
    the stationary chain (no directivity, no rotation)."""
    scene.validate()
    if not scene.noise_sources:
        raise BeamsimError("scene has no noise sources configured")
    n = scene.n_samples
    total = np.zeros((2, n))
    for i, src in enumerate(scene.noise_sources):
        rng = np.random.default_rng(src.seed)
        signal = rng.standard_normal(n) * SOURCE_STD
        renderer = _SourceRenderer(scene, src.azimuth_deg, src.distance_m,
                                   f"noise_{i}")
        total += renderer.render(signal)
    return AudioBuffer(total, scene.sample_rate)


def _ambient(scene: SceneConfig, std: float, *labels) -> np.ndarray:
    rng = substream(scene.master_seed, "ambient", *labels)
    return std * rng.standard_normal((2, scene.n_samples))


def simulate_experiment(scene: SceneConfig, n_takes: int = 8) -> RecordingSet:
    """Acquire the three per-scenario recordings, with repeated target takes.

    The target render is shared across takes; each take, the noise-only
    recording and the natural mixture receive independent ambient white
    noise at ``scene.ambient_snr_db`` relative to the target render power.
    """
    scene.validate()
    if n_takes < 1:
        raise BeamsimError("n_takes must be >= 1")
    if not scene.noise_sources:
        raise BeamsimError("simulate_experiment needs at least one noise source")

    n = scene.n_samples
    source = substream(scene.master_seed, "talker_source").standard_normal(n) * SOURCE_STD
    target_render, track = render_moving_talker(scene, source)
    noise_render = render_diffuse_noise(scene)

    if scene.ambient_snr_db is None or np.isinf(scene.ambient_snr_db):
        ambient_std = 0.0
    else:
        target_power = float(np.mean(target_render.samples**2))
        ambient_std = float(np.sqrt(target_power * 10.0 ** (-scene.ambient_snr_db / 10.0)))

    def with_ambient(base: np.ndarray, *labels) -> AudioBuffer:
        if ambient_std == 0.0:
            return AudioBuffer(base, scene.sample_rate)
        return AudioBuffer(base + _ambient(scene, ambient_std, *labels), scene.sample_rate)

    takes = tuple(
        with_ambient(target_render.samples, "target", i) for i in range(n_takes)
    )
    noise_only = with_ambient(noise_render.samples, "noise", 0)
    natural = with_ambient(target_render.samples + noise_render.samples, "mixture", 0)
    return RecordingSet(
        target_takes=takes,
        noise_only=noise_only,
        natural_mixture=natural,
        target_render=target_render,
        noise_render=noise_render,
        ground_truth=track,
        ambient_std=ambient_std,
        scene=scene,
    )
