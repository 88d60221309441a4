"""Time-domain buffers, WAV file I/O and the STFT/ISTFT pair.

The analysis-synthesis pair uses a root-Hann window on both sides with
50% overlap, which reconstructs perfectly because the squared window
telescopes to exactly 1 between consecutive hops.  Signals are padded by
one frame at each end so every input sample sits under a full window sum.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from beamsim.errors import BeamsimError, WavFormatError

DEFAULT_SAMPLE_RATE = 48_000

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioBuffer:
    """Multichannel audio: ``samples`` is [channels x length], float64."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if samples.ndim != 2:
            raise BeamsimError(f"samples must be 2-D [channels x length], got ndim={samples.ndim}")
        if not np.all(np.isfinite(samples)):
            raise BeamsimError("samples contain non-finite values")
        if self.sample_rate <= 0:
            raise BeamsimError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.ascontiguousarray(samples)
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class StftParams:
    """Analysis parameters: 20 ms frames, 50% overlap, root-Hann window."""

    frame_len: int = 960
    hop: int = 480
    fft_len: int = 1024

    def __post_init__(self):
        if self.hop * 2 != self.frame_len:
            raise BeamsimError(f"hop must be frame_len/2 (got hop={self.hop}, frame_len={self.frame_len})")
        if self.fft_len < self.frame_len:
            raise BeamsimError(f"fft_len must be >= frame_len (got {self.fft_len} < {self.frame_len})")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return _root_hann(self.frame_len)

    def bin_freqs_hz(self, sample_rate: int) -> np.ndarray:
        return np.arange(self.n_bins) * (sample_rate / self.fft_len)

    def frame_center_s(self, frame: int | np.ndarray, sample_rate: int):
        # frame k covers padded samples [k*hop, k*hop + frame_len); the left
        # pad is one frame, so the center in signal time is (k-1)*hop.
        return (np.asarray(frame) - 1) * self.hop / sample_rate


@lru_cache(maxsize=8)
def _root_hann(frame_len: int) -> np.ndarray:
    # periodic (DFT-even) Hann, then element-wise square root
    n = np.arange(frame_len)
    w = np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len))
    w.flags.writeable = False
    return w


@dataclass(frozen=True)
class StftTensor:
    """Complex STFT, ``data`` indexed [frame, bin, channel]."""

    data: np.ndarray
    params: StftParams
    sample_rate: int
    n_samples: int  # original signal length, needed to trim on synthesis

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise BeamsimError(f"STFT data must be 3-D [frames x bins x channels], got ndim={data.ndim}")
        if data.shape[1] != self.params.n_bins:
            raise BeamsimError(f"expected {self.params.n_bins} bins, got {data.shape[1]}")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.complex128))

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]

    def bin_freqs_hz(self) -> np.ndarray:
        return self.params.bin_freqs_hz(self.sample_rate)

    def frame_times_s(self) -> np.ndarray:
        return self.params.frame_center_s(np.arange(self.n_frames), self.sample_rate)


def _n_frames_for(n_samples: int, params: StftParams) -> int:
    # enough frames that every sample of the (left-padded) signal is covered
    # by two windows; +1 extra frame covers the right edge
    return int(np.ceil((n_samples + params.frame_len) / params.hop)) + 1


def stft(buffer: AudioBuffer, params: StftParams | None = None) -> StftTensor:
    """Analyze ``buffer`` into a [frames x bins x channels] complex tensor."""
    params = params or StftParams()
    x = buffer.samples
    if x.shape[1] < params.frame_len:
        raise BeamsimError(
            f"buffer shorter than one frame ({x.shape[1]} < {params.frame_len} samples)"
        )
    n = x.shape[1]
    n_frames = _n_frames_for(n, params)
    padded_len = (n_frames - 1) * params.hop + params.frame_len
    pad_right = padded_len - params.frame_len - n
    xp = np.pad(x, ((0, 0), (params.frame_len, pad_right)))

    idx = np.arange(params.frame_len)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = xp[:, idx] * params.window  # [ch, frame, n]
    spec = np.fft.rfft(frames, n=params.fft_len, axis=-1)  # [ch, frame, bin]
    return StftTensor(spec.transpose(1, 2, 0), params, buffer.sample_rate, n)


def istft(tensor: StftTensor, params: StftParams | None = None) -> AudioBuffer:
    """Weighted overlap-add synthesis; exact inverse of :func:`stft`."""
    if params is not None and params != tensor.params:
        raise BeamsimError(f"istft params {params} do not match tensor params {tensor.params}")
    params = tensor.params
    spec = tensor.data.transpose(2, 0, 1)  # [ch, frame, bin]
    frames = np.fft.irfft(spec, n=params.fft_len, axis=-1)[..., : params.frame_len]
    frames = frames * params.window

    n_frames = tensor.n_frames
    padded_len = (n_frames - 1) * params.hop + params.frame_len
    out = np.zeros((spec.shape[0], padded_len))
    for k in range(n_frames):
        start = k * params.hop
        out[:, start : start + params.frame_len] += frames[:, k]
    trimmed = out[:, params.frame_len : params.frame_len + tensor.n_samples]
    return AudioBuffer(trimmed, tensor.sample_rate)


# --- WAV file I/O -----------------------------------------------------------
#
# Hand-rolled RIFF/WAVE parsing: the stdlib wave module cannot write IEEE
# float or 24-bit PCM, and we need strict, descriptive failure modes.

_PCM16_SCALE = 32768.0
_PCM24_SCALE = 8388608.0


def read_wav(path) -> AudioBuffer:
    """Read a PCM 16/24-bit or IEEE float32 WAV file, normalized to [-1, 1]."""
    path = Path(path)
    if not path.exists():
        raise WavFormatError(f"no such file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + chunk_size]
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None or len(fmt) < 16:
        raise WavFormatError(f"{path}: corrupt header (missing fmt chunk)")
    if data is None:
        raise WavFormatError(f"{path}: corrupt header (missing data chunk)")

    tag, n_channels, sample_rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 40:
            raise WavFormatError(f"{path}: corrupt WAVE_FORMAT_EXTENSIBLE fmt chunk")
        (tag,) = struct.unpack_from("<H", fmt, 24)  # first two GUID bytes
    if n_channels < 1 or sample_rate < 1 or block_align < 1:
        raise WavFormatError(f"{path}: corrupt header (bad fmt fields)")

    usable = (len(data) // block_align) * block_align
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        ints = np.frombuffer(data[:usable], dtype="<i2")
        samples = ints.astype(np.float64) / _PCM16_SCALE
    elif tag == _WAVE_FORMAT_PCM and bits == 24:
        b = np.frombuffer(data[:usable], dtype=np.uint8).reshape(-1, 3)
        ints = (
            b[:, 0].astype(np.int32)
            | (b[:, 1].astype(np.int32) << 8)
            | (b[:, 2].astype(np.int32) << 16)
        )
        ints -= (ints & 0x800000) << 1  # sign extension
        samples = ints.astype(np.float64) / _PCM24_SCALE
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        samples = np.frombuffer(data[:usable], dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(
            f"{path}: unsupported codec (format tag {tag}, {bits}-bit); "
            "expected PCM16, PCM24 or IEEE float32"
        )

    samples = samples.reshape(-1, n_channels).T
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: data contains non-finite samples")
    return AudioBuffer(samples, sample_rate)


def write_wav(buffer: AudioBuffer, path, bit_depth="float32") -> None:
    """Write ``buffer`` as RIFF/WAVE.  ``bit_depth``: 16, 24 or "float32".

    Samples outside [-1, 1] raise instead of saturating.
    """
    if bit_depth not in (16, 24, "float32"):
        raise BeamsimError(f"bit_depth must be 16, 24 or 'float32', got {bit_depth!r}")
    x = buffer.samples
    peak = np.abs(x).max() if x.size else 0.0
    if peak > 1.0:
        raise BeamsimError(f"samples out of range for WAV output (peak {peak:.6g} > 1.0)")

    interleaved = x.T  # [n, ch]
    n_channels = buffer.n_channels
    if bit_depth == "float32":
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
        payload = interleaved.astype("<f4").tobytes()
    elif bit_depth == 16:
        tag, bits = _WAVE_FORMAT_PCM, 16
        ints = np.clip(np.round(interleaved * _PCM16_SCALE), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
    else:
        tag, bits = _WAVE_FORMAT_PCM, 24
        ints = np.clip(np.round(interleaved * _PCM24_SCALE), -8388608, 8388607).astype(np.int32)
        flat = ints.reshape(-1)
        b = np.empty((flat.size, 3), dtype=np.uint8)
        b[:, 0] = flat & 0xFF
        b[:, 1] = (flat >> 8) & 0xFF
        b[:, 2] = (flat >> 16) & 0xFF
        payload = b.tobytes()

    block_align = n_channels * bits // 8
    fmt = struct.pack(
        "<HHIIHH", tag, n_channels, buffer.sample_rate,
        buffer.sample_rate * block_align, block_align, bits,
    )
    chunks = [(b"fmt ", fmt)]
    if tag != _WAVE_FORMAT_PCM:
        chunks.append((b"fact", struct.pack("<I", buffer.n_samples)))
    chunks.append((b"data", payload))

    body = b"".join(
        cid + struct.pack("<I", len(c)) + c + (b"\x00" if len(c) & 1 else b"")
        for cid, c in chunks
    )
    blob = b"RIFF" + struct.pack("<I", 4 + len(body)) + b"WAVE" + body
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise BeamsimError(f"cannot write {path}: {exc}") from exc
