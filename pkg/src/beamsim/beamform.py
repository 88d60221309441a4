"""MVDR beamforming with covariance-whitening RTF tracking.

Per frequency bin, with a 2-microphone input x[k,l]:

* the noise spatial covariance R_v[l] is trained offline on a noise-only
  recording and factored as R_v = L L^H (Cholesky),
* each frame is whitened, y = L^{-1} x,
* a whitened SCM is tracked recursively,
  R_y[k] = alpha R_y[k-1] + (1 - alpha) y y^H,
* the RTF estimate is h = L q / (e1^H L q) with q the principal
  eigenvector of R_y[k],
* MVDR weights w = R_v^{-1} h / (h^H R_v^{-1} h) give the output w^H x.

All 2x2 kernels are closed-form and vectorized over a leading bin axis;
no diagonal loading is applied (the trained SCM is floored only against
degenerate synthetic inputs, and flagged when that engages).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from beamsim.audio import StftTensor
from beamsim.errors import BeamsimError

_EIG_TIE_TOL = 1e-12
_CW_DENOM_TOL = 1e-9  # relative to |L q|


def _hermitize(R: np.ndarray) -> np.ndarray:
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


def estimate_noise_scm(noise: StftTensor) -> "NoiseScm":
    """Average per-bin outer products of a noise-only STFT into R_v[l]."""
    if noise.n_channels != 2:
        raise BeamsimError(f"expected 2 channels, got {noise.n_channels}")
    if noise.n_frames < 10:
        raise BeamsimError(f"need >= 10 noise frames to train, got {noise.n_frames}")
    v = noise.data  # [k, l, m]
    R = np.einsum("klm,kln->lmn", v, np.conj(v)) / noise.n_frames
    return NoiseScm.from_matrices(_hermitize(R))


@dataclass(frozen=True)
class NoiseScm:
    """Per-bin 2x2 Hermitian noise covariance with cached factor and inverse."""

    matrices: np.ndarray          # [bins, 2, 2]
    factors: np.ndarray           # lower-triangular L with L L^H = R
    inverses: np.ndarray
    floored_bins: np.ndarray      # bool, PD flooring engaged

    @classmethod
    def from_matrices(cls, R: np.ndarray) -> "NoiseScm":
        R = np.asarray(R, dtype=np.complex128)
        if R.ndim == 2:
            R = R[None]
        R = _hermitize(R)
        R, floored = _floor_to_pd(R)
        L = factor_hermitian_2x2(R)
        inv = inverse_hermitian_2x2(R)
        return cls(R, L, inv, floored)

    @property
    def n_bins(self) -> int:
        return self.matrices.shape[0]


def _floor_to_pd(R: np.ndarray):
    """Raise eigenvalues below 1e-10 * trace/M to that floor (flagging bins).

    Zero-energy bins get an absolute floor tied to the average bin power so
    downstream factorization never sees an exactly singular matrix.
    """
    tr = np.real(R[..., 0, 0] + R[..., 1, 1])
    mean_tr = float(np.mean(tr)) if R.shape[0] else 0.0
    floor = 1e-10 * np.maximum(tr / 2.0, 1e-12 * max(mean_tr, 1e-300))
    lam_min, lam_max = eigvals_hermitian_2x2(R)
    deficit = np.maximum(floor - lam_min, 0.0)
    flagged = deficit > 0
    out = R.copy()
    out[..., 0, 0] += deficit
    out[..., 1, 1] += deficit
    return out, flagged


def eigvals_hermitian_2x2(R: np.ndarray):
    """(lambda_min, lambda_max) of Hermitian 2x2 matrices, closed form."""
    a = np.real(R[..., 0, 0])
    d = np.real(R[..., 1, 1])
    b = R[..., 1, 0]
    mid = 0.5 * (a + d)
    rad = np.sqrt(np.maximum((0.5 * (a - d)) ** 2 + np.abs(b) ** 2, 0.0))
    return mid - rad, mid + rad


def factor_hermitian_2x2(R: np.ndarray, bin_label=None) -> np.ndarray:
    """Cholesky factor L (lower, real positive diagonal) with L L^H = R."""
    R = np.asarray(R, dtype=np.complex128)
    single = R.ndim == 2
    if single:
        R = R[None]
    a = np.real(R[..., 0, 0])
    piv = a
    if np.any(piv <= 0):
        bad = int(np.argmax(piv <= 0))
        raise BeamsimError(_non_pd_msg(bad, bin_label))
    l11 = np.sqrt(a)
    l21 = R[..., 1, 0] / l11
    rem = np.real(R[..., 1, 1]) - np.abs(l21) ** 2
    if np.any(rem <= 0):
        bad = int(np.argmax(rem <= 0))
        raise BeamsimError(_non_pd_msg(bad, bin_label))
    L = np.zeros_like(R)
    L[..., 0, 0] = l11
    L[..., 1, 0] = l21
    L[..., 1, 1] = np.sqrt(rem)
    return L[0] if single else L


def _non_pd_msg(index: int, bin_label) -> str:
    where = f"bin {bin_label}" if bin_label is not None else f"matrix index {index}"
    return f"matrix not positive definite at {where}"


def inverse_hermitian_2x2(R: np.ndarray) -> np.ndarray:
    """Closed-form inverse of Hermitian 2x2 matrices."""
    R = np.asarray(R, dtype=np.complex128)
    a = R[..., 0, 0]
    d = R[..., 1, 1]
    b = R[..., 1, 0]
    det = np.real(a * d) - np.abs(b) ** 2
    if np.any(det <= 0):
        raise BeamsimError("matrix is singular (non-positive determinant)")
    inv = np.empty_like(R)
    inv[..., 0, 0] = d
    inv[..., 1, 1] = a
    inv[..., 1, 0] = -b
    inv[..., 0, 1] = -np.conj(b)
    return inv / det[..., None, None]


def whiten_frame(x: np.ndarray, noise_scm: NoiseScm, bin_index=None) -> np.ndarray:
    """y = L^{-1} x by forward substitution.  ``x`` is [..., 2]; when
    ``bin_index`` is None, x's leading axis must span all bins."""
    L = noise_scm.factors if bin_index is None else noise_scm.factors[bin_index]
    x = np.asarray(x, dtype=np.complex128)
    y0 = x[..., 0] / L[..., 0, 0]
    y1 = (x[..., 1] - L[..., 1, 0] * y0) / L[..., 1, 1]
    return np.stack([y0, y1], axis=-1)


def alpha_from_tau(tau_s: float, hop_s: float) -> float:
    """Forgetting factor of the exponential SCM recursion: exp(-hop/tau)."""
    if tau_s <= 0 or hop_s <= 0:
        raise BeamsimError("tau and hop must be positive")
    return float(np.exp(-hop_s / tau_s))


def scm_update(R_prev: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """R = alpha R_prev + (1 - alpha) y y^H (Hermitian PSD preserved)."""
    if not 0.0 < alpha <= 1.0:
        raise BeamsimError(f"alpha must be in (0, 1], got {alpha}")
    y = np.asarray(y, dtype=np.complex128)
    outer = y[..., :, None] * np.conj(y[..., None, :])
    return alpha * np.asarray(R_prev, dtype=np.complex128) + (1.0 - alpha) * outer


def principal_eigvec_2x2(R: np.ndarray, prev_q: np.ndarray | None = None):
    """Unit principal eigenvector and largest eigenvalue, closed form.

    The phase is fixed so the first nonzero component is real positive.
    Degenerate (equal-eigenvalue) matrices fall back to ``prev_q`` when
    given, else e1; those entries are flagged in the returned mask.
    """
    R = np.asarray(R, dtype=np.complex128)
    single = R.ndim == 2
    if single:
        R = R[None]
    a = np.real(R[..., 0, 0])
    d = np.real(R[..., 1, 1])
    b = R[..., 1, 0]
    _, lam = eigvals_hermitian_2x2(R)

    # two algebraic candidates; whichever has the larger norm is stable
    c1 = np.stack([lam - d, b], axis=-1)
    c2 = np.stack([np.conj(b), lam - a], axis=-1)
    n1 = np.linalg.norm(c1, axis=-1)
    n2 = np.linalg.norm(c2, axis=-1)
    q = np.where((n1 >= n2)[..., None], c1, c2)
    norm = np.maximum(n1, n2)
    scale = np.maximum(np.abs(lam), 1.0)
    degenerate = norm <= _EIG_TIE_TOL * scale

    fallback = np.zeros_like(q)
    if prev_q is not None:
        fallback[...] = prev_q
    else:
        fallback[..., 0] = 1.0
    q = np.where(degenerate[..., None], fallback, q / np.where(norm == 0, 1.0, norm)[..., None])

    # rotate so the first component with non-negligible magnitude is real > 0
    first = np.where(np.abs(q[..., 0]) > 1e-12, q[..., 0], q[..., 1])
    phase = first / np.where(np.abs(first) == 0, 1.0, np.abs(first))
    q = q * np.conj(phase)[..., None]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    if single:
        return q[0], float(lam[0]), bool(degenerate[0])
    return q, lam, degenerate


def cw_rtf(noise_factor: np.ndarray, q: np.ndarray, prev_h: np.ndarray | None = None):
    """Covariance-whitening RTF: h = L q / (e1^H L q), h[0] = 1.

    Bins whose denominator is vanishingly small relative to |L q| hold the
    previous estimate (e1 at start) and are flagged.
    """
    L = np.asarray(noise_factor, dtype=np.complex128)
    q = np.asarray(q, dtype=np.complex128)
    single = L.ndim == 2
    if single:
        L = L[None]
        q = q[None]
    lq0 = L[..., 0, 0] * q[..., 0]
    lq1 = L[..., 1, 0] * q[..., 0] + L[..., 1, 1] * q[..., 1]
    lq = np.stack([lq0, lq1], axis=-1)
    norm = np.linalg.norm(lq, axis=-1)
    held = np.abs(lq0) <= _CW_DENOM_TOL * norm

    denom = np.where(held, 1.0, lq0)
    h = lq / denom[..., None]
    if prev_h is None:
        fallback = np.zeros_like(h)
        fallback[..., 0] = 1.0
    else:
        fallback = np.broadcast_to(prev_h, h.shape)
    h = np.where(held[..., None], fallback, h)
    if single:
        return h[0], bool(held[0])
    return h, held


def mvdr_weights(noise_scm: NoiseScm, bin_index, h: np.ndarray) -> np.ndarray:
    """w = R_v^{-1} h / (h^H R_v^{-1} h); satisfies w^H h = 1."""
    inv = noise_scm.inverses if bin_index is None else noise_scm.inverses[bin_index]
    return mvdr_weights_from_inverse(inv, h)


def mvdr_weights_from_inverse(R_inv: np.ndarray, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.complex128)
    if not np.all(np.isfinite(h)):
        raise BeamsimError("RTF estimate contains non-finite values")
    num = np.einsum("...ij,...j->...i", R_inv, h)
    denom = np.real(np.einsum("...i,...i->...", np.conj(h), num))
    if np.any(denom <= 0):
        raise BeamsimError("h^H R_v^{-1} h must be positive (singular SCM?)")
    return num / denom[..., None]


@dataclass(frozen=True)
class BeamformConfig:
    tau_s: float = 0.2
    reference_channel: int = 0  # 0 = left ear
    burn_in_s: float = 1.0

    def alpha(self, hop_s: float) -> float:
        return alpha_from_tau(self.tau_s, hop_s)


@dataclass
class BeamRun:
    """Per-frame, per-bin weights and outputs of one beamformer pass."""

    weights: np.ndarray           # [frames, bins, 2]
    rtf: np.ndarray               # [frames, bins, 2]
    output: StftTensor            # beamformed mixture, single channel
    config: BeamformConfig
    flags: dict = field(default_factory=dict)   # name -> per-bin event counts
    shadow_outputs: dict = field(default_factory=dict)  # name -> StftTensor


def identity_run(mixture: StftTensor, config: BeamformConfig | None = None) -> BeamRun:
    """A pass-through run with w = e_ref everywhere (metric-chain null test)."""
    config = config or BeamformConfig()
    k, l, m = mixture.data.shape
    w = np.zeros((k, l, m), dtype=np.complex128)
    w[..., config.reference_channel] = 1.0
    h = w.copy()
    out = np.einsum("klm,klm->kl", np.conj(w), mixture.data)
    out_t = StftTensor(out[..., None], mixture.params, mixture.sample_rate, mixture.n_samples)
    return BeamRun(weights=w, rtf=h, output=out_t, config=config)


def process_mvdr_cw(mixture: StftTensor, noise_scm: NoiseScm,
                    config: BeamformConfig | None = None,
                    components: dict | None = None) -> BeamRun:
    """Run the adaptive MVDR+CW chain over a 2-channel mixture STFT.

    Per frame: whiten, update the whitened SCM (initialized to the first
    frame's outer product), take its principal eigenvector, de-whiten and
    normalize into the RTF estimate, form MVDR weights, apply.  Optional
    ``components`` tensors (e.g. clean target/noise) are shadow-filtered
    with the same weights.
    """
    config = config or BeamformConfig()
    if mixture.n_channels != 2:
        raise BeamsimError(f"mixture must have 2 channels, got {mixture.n_channels}")
    if noise_scm.n_bins != mixture.params.n_bins:
        raise BeamsimError("noise SCM bin count does not match mixture params")
    if config.reference_channel not in (0, 1):
        raise BeamsimError("reference_channel must be 0 or 1")
    if config.reference_channel == 1:
        # swap channels so the math below can keep e1 as reference
        swapped = StftTensor(mixture.data[:, :, ::-1], mixture.params,
                             mixture.sample_rate, mixture.n_samples)
        swapped_scm = NoiseScm.from_matrices(noise_scm.matrices[:, ::-1, :][:, :, ::-1])
        run = process_mvdr_cw(swapped, swapped_scm,
                              BeamformConfig(config.tau_s, 0, config.burn_in_s), None)
        weights = run.weights[:, :, ::-1]
        rtf = run.rtf[:, :, ::-1]
        out = np.einsum("klm,klm->kl", np.conj(weights), mixture.data)
        out_t = StftTensor(out[..., None], mixture.params, mixture.sample_rate,
                           mixture.n_samples)
        result = BeamRun(weights=weights, rtf=rtf, output=out_t, config=config,
                         flags=run.flags)
        _attach_components(result, components)
        return result

    x = mixture.data  # [k, l, 2]
    n_frames, n_bins, _ = x.shape
    alpha = config.alpha(mixture.params.hop / mixture.sample_rate)
    L = noise_scm.factors

    weights = np.empty((n_frames, n_bins, 2), dtype=np.complex128)
    rtf = np.empty((n_frames, n_bins, 2), dtype=np.complex128)
    held_count = np.zeros(n_bins, dtype=np.int64)
    degen_count = np.zeros(n_bins, dtype=np.int64)

    h_prev = np.zeros((n_bins, 2), dtype=np.complex128)
    h_prev[:, 0] = 1.0
    q_prev = h_prev.copy()
    R_y = None
    for k in range(n_frames):
        y = whiten_frame(x[k], noise_scm)
        if R_y is None:
            R_y = y[:, :, None] * np.conj(y[:, None, :])
        else:
            R_y = scm_update(R_y, y, alpha)
        q, _, degenerate = principal_eigvec_2x2(R_y, prev_q=q_prev)
        h, held = cw_rtf(L, q, prev_h=h_prev)
        w = mvdr_weights_from_inverse(noise_scm.inverses, h)
        weights[k] = w
        rtf[k] = h
        held_count += held
        degen_count += degenerate
        h_prev = h
        q_prev = q

    out = np.einsum("klm,klm->kl", np.conj(weights), x)
    out_t = StftTensor(out[..., None], mixture.params, mixture.sample_rate,
                       mixture.n_samples)
    flags = {
        "cw_denominator_held": held_count,
        "eigen_degenerate": degen_count,
        "noise_scm_floored": noise_scm.floored_bins.astype(np.int64),
    }
    run = BeamRun(weights=weights, rtf=rtf, output=out_t, config=config, flags=flags)
    _attach_components(run, components)
    return run


def _attach_components(run: BeamRun, components: dict | None) -> None:
    if not components:
        return
    for name, tensor in components.items():
        run.shadow_outputs[name] = shadow_apply(run, tensor)


def shadow_apply(beam_run: BeamRun, component: StftTensor) -> StftTensor:
    """Apply the run's recorded weights to an aligned component tensor.

    output[k, l] = w[k, l]^H component[k, l]; linear in the component, so
    filtering target and noise separately and summing matches filtering
    their sum.
    """
    if component.data.shape[:2] != beam_run.weights.shape[:2]:
        raise BeamsimError(
            f"component shape {component.data.shape[:2]} does not match "
            f"run shape {beam_run.weights.shape[:2]}"
        )
    if component.n_channels != beam_run.weights.shape[2]:
        raise BeamsimError("component channel count does not match weights")
    out = np.einsum("klm,klm->kl", np.conj(beam_run.weights), component.data)
    return StftTensor(out[..., None], component.params, component.sample_rate,
                      component.n_samples)
