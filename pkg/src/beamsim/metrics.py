"""Objective measurements: SNR, per-band SNR gain, NMSE, repeatability,
interaural cues and spectral subtraction.

Ratios that hit exact zero are reported as a -300 dB sentinel instead of
-inf so CSV consumers never have to parse infinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from beamsim.audio import AudioBuffer, StftTensor
from beamsim.beamform import BeamRun, shadow_apply
from beamsim.errors import BeamsimError
from beamsim.headmodel import LEFT, RIGHT, HeadModel

SENTINEL_DB = -300.0


def _db(power_ratio) -> float:
    if power_ratio <= 0:
        return SENTINEL_DB
    return max(10.0 * float(np.log10(power_ratio)), SENTINEL_DB)


def _power(buffer: AudioBuffer) -> float:
    return float(np.sum(buffer.samples.astype(np.float64) ** 2))


def snr_db(target: AudioBuffer, noise: AudioBuffer, per_channel: bool = False):
    """10 log10 of target-to-noise energy; zero noise energy is an error."""
    if target.samples.shape != noise.samples.shape:
        raise BeamsimError("target and noise must have identical shapes")
    if per_channel:
        pt = np.sum(target.samples**2, axis=1)
        pn = np.sum(noise.samples**2, axis=1)
        if np.any(pn == 0):
            raise BeamsimError("noise energy is zero in at least one channel")
        return np.array([_db(t / n) for t, n in zip(pt, pn)])
    pn = _power(noise)
    if pn == 0:
        raise BeamsimError("noise energy is zero")
    return _db(_power(target) / pn)


def scale_to_snr(target: AudioBuffer, noise: AudioBuffer, desired_db: float) -> float:
    """Factor to apply to ``noise`` so that snr_db(target, factor*noise)
    equals ``desired_db``."""
    if not np.isfinite(desired_db):
        raise BeamsimError("desired SNR must be finite")
    pt, pn = _power(target), _power(noise)
    if pt == 0 or pn == 0:
        raise BeamsimError("target and noise must both have nonzero power")
    return float(np.sqrt(pt / pn) * 10.0 ** (-desired_db / 20.0))


def nmse_samplewise(test: AudioBuffer, reference: AudioBuffer,
                    per_channel: bool = False):
    """Sample-wise normalized mean-squared error in dB."""
    if test.samples.shape != reference.samples.shape:
        raise BeamsimError("test and reference must have identical shapes")
    if test.sample_rate != reference.sample_rate:
        raise BeamsimError("sample rates differ")
    err = test.samples - reference.samples
    if per_channel:
        pe = np.sum(err**2, axis=1)
        pr = np.sum(reference.samples**2, axis=1)
        if np.any(pr == 0):
            raise BeamsimError("reference energy is zero in at least one channel")
        return np.array([_db(e / r) for e, r in zip(pe, pr)])
    pr = _power(reference)
    if pr == 0:
        raise BeamsimError("reference energy is zero")
    return _db(float(np.sum(err**2)) / pr)


def repeatability_error(takes, bias_corrected: bool = False) -> np.ndarray:
    """Per-take relative MSE in dB against the sample-wise mean of all takes.

    With ``bias_corrected`` the (n-1)/n factor that the reference's own
    noise contributes is divided out, estimating each take's noise power
    directly.
    """
    takes = list(takes)
    if len(takes) < 2:
        raise BeamsimError("need at least 2 takes")
    shape = takes[0].samples.shape
    for t in takes[1:]:
        if t.samples.shape != shape:
            raise BeamsimError("all takes must have identical shapes")
    stack = np.stack([t.samples for t in takes])
    ref = stack.mean(axis=0)
    p_ref = float(np.sum(ref**2))
    if p_ref == 0:
        raise BeamsimError("mean reference is identically zero")
    out = np.array([_db(float(np.sum((s - ref) ** 2)) / p_ref) for s in stack])
    if bias_corrected:
        n = len(takes)
        correction = 10.0 * np.log10((n - 1) / n)
        out = np.where(out > SENTINEL_DB, out - correction, out)
    return out


# --- per-band SNR gain -------------------------------------------------------

@dataclass(frozen=True)
class SnrGainCurve:
    """Third-octave SNR gain of one beamformer run."""

    band_hz: np.ndarray
    input_snr_db: np.ndarray
    output_snr_db: np.ndarray
    gain_db: np.ndarray
    speed_rev_s: float | None = None
    burn_in_s: float = 1.0
    flagged_bands: tuple = ()

    def mean_gain_db(self, above_hz: float | None = None) -> float:
        mask = np.ones(len(self.band_hz), dtype=bool)
        if above_hz is not None:
            mask &= self.band_hz > above_hz
        mask &= self.gain_db > SENTINEL_DB
        if not mask.any():
            raise BeamsimError("no usable bands in requested range")
        return float(np.mean(self.gain_db[mask]))


def third_octave_bands(max_hz: float, min_hz: float = 80.0):
    """Base-2 third-octave band (center, lower, upper) triples within range."""
    bands = []
    for n in range(-12, 20):
        center = 1000.0 * 2.0 ** (n / 3.0)
        if center < min_hz or center > max_hz:
            continue
        bands.append((center, center * 2.0 ** (-1 / 6), center * 2.0 ** (1 / 6)))
    return bands


def snr_gain_per_band(beam_run: BeamRun, target: StftTensor, noise: StftTensor,
                      burn_in_s: float = 1.0, speed_rev_s: float | None = None) -> SnrGainCurve:
    """Third-octave input/output SNR and gain for one run.

    Input SNR comes from the component powers at the reference ear; output
    SNR from the shadow-filtered components.  Frames whose centers fall in
    the first ``burn_in_s`` seconds (or after the signal ends) are excluded.
    """
    ref = beam_run.config.reference_channel
    out_t = beam_run.shadow_outputs.get("target") or shadow_apply(beam_run, target)
    out_n = beam_run.shadow_outputs.get("noise") or shadow_apply(beam_run, noise)

    times = target.frame_times_s()
    duration = target.n_samples / target.sample_rate
    frames = (times >= burn_in_s) & (times <= duration)
    if not frames.any():
        raise BeamsimError("no frames left after burn-in exclusion")

    freqs = target.bin_freqs_hz()
    in_t = np.sum(np.abs(target.data[frames, :, ref]) ** 2, axis=0)
    in_n = np.sum(np.abs(noise.data[frames, :, ref]) ** 2, axis=0)
    o_t = np.sum(np.abs(out_t.data[frames, :, 0]) ** 2, axis=0)
    o_n = np.sum(np.abs(out_n.data[frames, :, 0]) ** 2, axis=0)

    centers, in_db, out_db, gain, flagged = [], [], [], [], []
    for center, lo, hi in third_octave_bands(max_hz=freqs[-1]):
        sel = (freqs >= lo) & (freqs < hi)
        if not sel.any():
            continue
        bt, bn = float(in_t[sel].sum()), float(in_n[sel].sum())
        bot, bon = float(o_t[sel].sum()), float(o_n[sel].sum())
        if bn == 0 or bon == 0:
            flagged.append(f"band {center:.1f} Hz: zero noise power")
            continue
        snr_in = _db(bt / bn)
        snr_out = _db(bot / bon)
        centers.append(center)
        in_db.append(snr_in)
        out_db.append(snr_out)
        gain.append(snr_out - snr_in)
    if not centers:
        raise BeamsimError("no bands contained any STFT bins")
    return SnrGainCurve(
        band_hz=np.array(centers),
        input_snr_db=np.array(in_db),
        output_snr_db=np.array(out_db),
        gain_db=np.array(gain),
        speed_rev_s=speed_rev_s,
        burn_in_s=burn_in_s,
        flagged_bands=tuple(flagged),
    )


# --- interaural cues ---------------------------------------------------------

def _welch_psd(x: np.ndarray, nfft: int) -> np.ndarray:
    """Hann-windowed averaged periodogram, 50% overlap (relative units)."""
    hop = nfft // 2
    if x.shape[0] < nfft:
        raise BeamsimError(f"signal too short for {nfft}-point PSD")
    n_frames = (x.shape[0] - nfft) // hop + 1
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(nfft) / nfft)
    idx = np.arange(nfft)[None, :] + hop * np.arange(n_frames)[:, None]
    spec = np.fft.rfft(x[idx] * w, axis=1)
    return np.mean(np.abs(spec) ** 2, axis=0)


def ild_curve(render_theta: AudioBuffer, render_ref: AudioBuffer | None = None,
              nfft: int = 4096):
    """Per-frequency left/right level difference of a binaural render, in dB.

    With ``render_ref`` (typically the 0 deg render) the ratio is referenced
    to that response, HRTF-style.  Returns (freq_hz, ild_db); bins with a
    zero spectrum in any involved channel are excluded.
    """
    if render_theta.n_channels != 2:
        raise BeamsimError("ILD needs a 2-channel render")
    freqs = np.fft.rfftfreq(nfft, 1.0 / render_theta.sample_rate)
    pl = _welch_psd(render_theta.samples[LEFT], nfft)
    pr = _welch_psd(render_theta.samples[RIGHT], nfft)
    valid = (pl > 0) & (pr > 0)
    ild = np.zeros_like(pl)
    ild[valid] = 10.0 * np.log10(pl[valid] / pr[valid])
    if render_ref is not None:
        if render_ref.sample_rate != render_theta.sample_rate:
            raise BeamsimError("reference render sample rate differs")
        rl = _welch_psd(render_ref.samples[LEFT], nfft)
        rr = _welch_psd(render_ref.samples[RIGHT], nfft)
        rv = (rl > 0) & (rr > 0)
        valid &= rv
        ild[valid] -= 10.0 * np.log10(rl[valid] / rr[valid])
    return freqs[valid], ild[valid]


def octave_band_ild(freq_hz: np.ndarray, ild_db: np.ndarray, min_hz: float = 125.0):
    """Average an ILD curve into octave bands; returns (centers, band_ild)."""
    centers, values = [], []
    c = min_hz
    while c <= freq_hz[-1]:
        sel = (freq_hz >= c / np.sqrt(2)) & (freq_hz < c * np.sqrt(2))
        if sel.any():
            centers.append(c)
            values.append(float(np.mean(ild_db[sel])))
        c *= 2.0
    return np.array(centers), np.array(values)


def itd_from_renders(left: np.ndarray, right: np.ndarray, sample_rate: int) -> float:
    """Interaural delay from the cross-correlation peak, parabolic-refined.

    Positive when the right channel lags the left (source on the left).
    """
    left = np.asarray(left, dtype=np.float64).ravel()
    right = np.asarray(right, dtype=np.float64).ravel()
    if left.shape != right.shape:
        raise BeamsimError("left/right must have equal length")
    n = left.shape[0]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    cc = np.fft.irfft(np.conj(np.fft.rfft(left, nfft)) * np.fft.rfft(right, nfft), nfft)
    peak = int(np.argmax(cc))
    if cc[peak] <= 0 or not np.any(cc != 0):
        raise BeamsimError("flat cross-correlation (silence?)")
    ym1, y0, yp1 = cc[peak - 1], cc[peak], cc[(peak + 1) % nfft]
    denom = ym1 - 2 * y0 + yp1
    delta = 0.0 if denom == 0 else 0.5 * (ym1 - yp1) / denom
    lag = peak if peak <= nfft // 2 else peak - nfft
    return float((lag + delta) / sample_rate)


@dataclass(frozen=True)
class InterauralCues:
    """Model-level ILD/ITD tables on an azimuth grid."""

    azimuths_deg: np.ndarray
    freqs_hz: np.ndarray
    ild_db: np.ndarray  # [azimuths x freqs]
    itd_s: np.ndarray   # [azimuths]


def interaural_cues(head: HeadModel, freqs_hz: np.ndarray,
                    azimuth_step_deg: float = 5.0) -> InterauralCues:
    """Evaluate the parametric head model on a regular azimuth grid."""
    az = np.arange(-180.0, 180.0 + 1e-9, azimuth_step_deg)
    freqs = np.asarray(freqs_hz, dtype=np.float64)
    ild = np.empty((az.size, freqs.size))
    for i, theta in enumerate(az):
        hl = head.shadow_gain(theta, LEFT, freqs)
        hr = head.shadow_gain(theta, RIGHT, freqs)
        ild[i] = 20.0 * np.log10(np.abs(hl) / np.abs(hr))
    itd = np.array([head.itd_seconds(theta) for theta in az])
    return InterauralCues(az, freqs, ild, itd)


def spectral_subtract(signal_psd: np.ndarray, noise_psd: np.ndarray) -> np.ndarray:
    """Floor-protected PSD subtraction for noise-floor removal."""
    signal_psd = np.asarray(signal_psd, dtype=np.float64)
    noise_psd = np.asarray(noise_psd, dtype=np.float64)
    if signal_psd.shape != noise_psd.shape:
        raise BeamsimError("PSDs must share one frequency grid")
    floor = 1e-12 * float(signal_psd.max()) if signal_psd.size else 0.0
    return np.maximum(signal_psd - noise_psd, floor)
