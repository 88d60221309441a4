"""Binaural dynamic-scene simulator and adaptive beamformer evaluation toolkit.

Renders what a stationary two-ear listener records while a directional
talker rotates amid diffuse loudspeaker noise, runs an MVDR beamformer
with covariance-whitening RTF tracking on the result, and measures
mixing accuracy, repeatability, per-band SNR gain and interaural cues.
"""

from beamsim.audio import AudioBuffer, StftParams, StftTensor, istft, read_wav, stft, write_wav
from beamsim.beamform import (
    BeamformConfig,
    BeamRun,
    NoiseScm,
    alpha_from_tau,
    cw_rtf,
    estimate_noise_scm,
    factor_hermitian_2x2,
    identity_run,
    mvdr_weights,
    principal_eigvec_2x2,
    process_mvdr_cw,
    scm_update,
    shadow_apply,
    whiten_frame,
)
from beamsim.errors import BeamsimError, ConfigError, WavFormatError
from beamsim.headmodel import HeadModel, directivity_gain, head_shadow_gain, itd_seconds
from beamsim.metrics import (
    InterauralCues,
    SnrGainCurve,
    ild_curve,
    interaural_cues,
    itd_from_renders,
    nmse_samplewise,
    repeatability_error,
    scale_to_snr,
    snr_db,
    snr_gain_per_band,
    spectral_subtract,
)
from beamsim.render import (
    RecordingSet,
    TransferFunctionTrack,
    render_diffuse_noise,
    render_moving_talker,
    simulate_experiment,
)
from beamsim.scene import (
    DirectivityModel,
    HeadConfig,
    NoiseSourceConfig,
    ReverbConfig,
    SceneConfig,
    TalkerConfig,
    Trajectory,
    orientation_at,
)

__version__ = "0.1.0"
