"""Parametric spherical listener-head and talker-directivity models.

Conventions used throughout the package:

* Azimuth is measured counterclockwise from the listener's front (seen
  from above), so +90 deg is the LEFT side.  The left ear sits at +90 deg
  on the head, the right ear at -90 deg.
* ITD is positive when the source is on the left (the right ear lags).
* The shadow filter's ear axes are offset 10 deg behind the interaural
  axis (+/-100 deg), the usual placement for a single-pole/zero
  spherical-shadow approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_SOUND_MPS = 343.0
DEFAULT_HEAD_RADIUS_M = 0.0875
_EAR_AXIS_OFFSET_DEG = 10.0

LEFT, RIGHT = 0, 1


def itd_seconds(source_azimuth_deg, head_radius_m=DEFAULT_HEAD_RADIUS_M,
                c_mps=SPEED_OF_SOUND_MPS):
    """Woodworth spherical-head interaural time difference.

    tau = (a/c) * (theta + sin theta) with theta folded to [0, 90] deg;
    antisymmetric in azimuth, zero at 0 and 180 deg, maximal at +/-90 deg.
    """
    if head_radius_m <= 0 or c_mps <= 0:
        raise ValueError("head radius and speed of sound must be positive")
    az = np.asarray(source_azimuth_deg, dtype=np.float64)
    wrapped = (az + 180.0) % 360.0 - 180.0
    sign = np.sign(np.where(wrapped == -180.0, 0.0, wrapped))
    folded = np.minimum(np.abs(wrapped), 180.0 - np.abs(wrapped))
    theta = np.deg2rad(folded)
    tau = sign * (head_radius_m / c_mps) * (theta + np.sin(theta))
    return tau if tau.ndim else float(tau)


def head_shadow_gain(source_azimuth_deg, ear, freq_hz,
                     head_radius_m=DEFAULT_HEAD_RADIUS_M, c_mps=SPEED_OF_SOUND_MPS):
    """First-order spherical-shadow frequency response for one ear.

    H(w, theta) = (1 + i alpha w/(2 w0)) / (1 + i w/(2 w0)), w0 = c/a and
    alpha(theta) = 1 + cos(theta - theta_ear).  |H| -> 1 at DC for every
    angle; at high frequency the ipsilateral ear is boosted toward +6 dB
    while the diametrically opposite angle is fully shadowed.
    """
    theta_ear = ear_axis_deg(ear)
    alpha = 1.0 + np.cos(np.deg2rad(np.asarray(source_azimuth_deg, dtype=np.float64) - theta_ear))
    # w/(2 w0) = pi f a / c
    x = np.pi * np.asarray(freq_hz, dtype=np.float64) * head_radius_m / c_mps
    return (1.0 + 1j * alpha * x) / (1.0 + 1j * x)


def ear_axis_deg(ear) -> float:
    """Shadow-model axis of an ear; LEFT -> +100 deg, RIGHT -> -100 deg."""
    if ear in (LEFT, "L", "left"):
        return 90.0 + _EAR_AXIS_OFFSET_DEG
    if ear in (RIGHT, "R", "right"):
        return -(90.0 + _EAR_AXIS_OFFSET_DEG)
    raise ValueError(f"ear must be left/right, got {ear!r}")


def directivity_gain(cos_theta_rel, freq_hz, band_centers_hz, betas):
    """Frequency-dependent cardioid-mix radiation gain of the talker.

    gain = (1 - beta(f)) + beta(f) * cos(theta_rel), with beta interpolated
    in log-frequency between the octave-band anchors and clamped outside.
    Fully on-axis gain is 1 in every band; larger beta means a more
    directional band.
    """
    f = np.maximum(np.asarray(freq_hz, dtype=np.float64), 1.0)
    beta = np.interp(np.log(f), np.log(np.asarray(band_centers_hz, dtype=np.float64)),
                     np.asarray(betas, dtype=np.float64))
    return (1.0 - beta) + beta * np.asarray(cos_theta_rel, dtype=np.float64)


@dataclass(frozen=True)
class HeadModel:
    """Listener-head geometry plus toggles for the binaural cue models."""

    radius_m: float = DEFAULT_HEAD_RADIUS_M
    c_mps: float = SPEED_OF_SOUND_MPS
    shadow: bool = True

    def ear_position_m(self, ear) -> np.ndarray:
        """Ear location in listener coordinates (x front, y left)."""
        y = self.radius_m if ear in (LEFT, "L", "left") else -self.radius_m
        return np.array([0.0, y])

    def itd_seconds(self, source_azimuth_deg):
        return itd_seconds(source_azimuth_deg, self.radius_m, self.c_mps)

    def ear_delay_s(self, source_azimuth_deg, distance_m, ear):
        """Propagation delay to one ear: common r/c plus/minus half the ITD."""
        half = 0.5 * self.itd_seconds(source_azimuth_deg)
        common = distance_m / self.c_mps
        return common - half if ear in (LEFT, "L", "left") else common + half

    def shadow_gain(self, source_azimuth_deg, ear, freq_hz):
        if not self.shadow:
            return np.ones_like(np.asarray(freq_hz, dtype=np.float64), dtype=np.complex128)
        return head_shadow_gain(source_azimuth_deg, ear, freq_hz, self.radius_m, self.c_mps)
