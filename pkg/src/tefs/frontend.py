"""Envelope, fine-structure and STFT input representations.

A waveform is split into ``K`` bands whose cut-off frequencies are equally
spaced along the human cochlear (Greenwood) map.  Each band is turned into
its analytic signal, whose magnitude is the temporal envelope and whose
phase cosine is the temporal fine structure.  Both are averaged within
non-overlapping frames and log-scaled.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .corpus import Waveform

# Human Greenwood map constants: f = A * (10**(a*x) - k), x in [0, 1].
GREENWOOD_A = 165.4
GREENWOOD_ALPHA = 2.1
GREENWOOD_K = 0.88

DEFAULT_BANDS = 32
DEFAULT_F_LO = 80.0
DEFAULT_F_HI = 7200.0
DEFAULT_FRAME_LENGTH = 0.006
DEFAULT_STFT_FRAME_LENGTH = 0.003875
# Butterworth prototype order.  Order 4 leaves the top band's lower skirt at
# -29 dB one band away (bilinear warping near Nyquist); order 5 clears -30 dB
# for every band.
FILTER_ORDER = 5
LOG_FLOOR = 1e-5


class Kind(str, enum.Enum):
    ENVELOPE = "envelope"
    FINE_STRUCTURE = "fine_structure"
    STFT = "stft"

    @property
    def code(self) -> int:
        return _KIND_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Kind":
        for kind, c in _KIND_CODES.items():
            if c == code:
                return kind
        raise ValueError(f"unknown representation kind code {code}")


_KIND_CODES = {Kind.ENVELOPE: 0, Kind.FINE_STRUCTURE: 1, Kind.STFT: 2}


@dataclass(frozen=True)
class Filterbank:
    """Band-pass filters with Greenwood-spaced cut-offs.

    ``sos[k]`` holds the second-order sections of band ``k`` whose pass band
    is ``[cutoffs[k], cutoffs[k + 1]]``.
    """

    cutoffs: np.ndarray
    sample_rate: int
    sos: tuple

    @property
    def n_bands(self) -> int:
        return len(self.cutoffs) - 1

    def response(self, freqs: np.ndarray) -> np.ndarray:
        """Single-pass magnitude response of every band at ``freqs`` (Hz), shape (K, F)."""
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        out = np.empty((self.n_bands, freqs.size))
        for k, sos in enumerate(self.sos):
            _, h = signal.sosfreqz(sos, worN=freqs, fs=self.sample_rate)
            out[k] = np.abs(h)
        return out


@dataclass
class Representation:
    kind: Kind
    values: np.ndarray  # (K, L)
    frame_length: float
    sample_rate: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def greenwood_freq(x):
    """Characteristic frequency (Hz) at relative cochlear position ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any((x < 0.0) | (x > 1.0)):
        raise ValueError("cochlear position must lie in [0, 1]")
    f = GREENWOOD_A * (10.0 ** (GREENWOOD_ALPHA * x) - GREENWOOD_K)
    return float(f) if f.ndim == 0 else f


def greenwood_pos(f):
    """Inverse of :func:`greenwood_freq`."""
    f = np.asarray(f, dtype=float)
    x = np.log10(f / GREENWOOD_A + GREENWOOD_K) / GREENWOOD_ALPHA
    return float(x) if x.ndim == 0 else x


def design_filterbank(
    n_bands: int = DEFAULT_BANDS,
    f_lo: float = DEFAULT_F_LO,
    f_hi: float = DEFAULT_F_HI,
    sample_rate: int = 16000,
) -> Filterbank:
    if n_bands < 1:
        raise ValueError("need at least one band")
    if not 0 < f_lo < f_hi:
        raise ValueError(f"invalid band edges: f_lo={f_lo}, f_hi={f_hi}")
    if f_hi >= sample_rate / 2:
        raise ValueError(f"f_hi={f_hi} Hz must be below Nyquist ({sample_rate / 2} Hz)")
    pos = np.linspace(greenwood_pos(f_lo), greenwood_pos(f_hi), n_bands + 1)
    cutoffs = greenwood_freq(pos)
    # pin the end points so they are exact rather than round-tripped
    cutoffs[0], cutoffs[-1] = f_lo, f_hi
    sos = tuple(
        signal.butter(FILTER_ORDER, [lo, hi], btype="bandpass", output="sos", fs=sample_rate)
        for lo, hi in zip(cutoffs[:-1], cutoffs[1:])
    )
    return Filterbank(cutoffs=cutoffs, sample_rate=int(sample_rate), sos=sos)


def filter_subbands(w: Waveform, fb: Filterbank) -> np.ndarray:
    """Zero-phase band-pass filtering; returns a (K, N) float64 array."""
    if w.sample_rate != fb.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} Hz does not match filterbank rate {fb.sample_rate} Hz"
        )
    x = np.asarray(w.samples, dtype=np.float64)
    out = np.empty((fb.n_bands, x.size))
    for k, sos in enumerate(fb.sos):
        out[k] = signal.sosfiltfilt(sos, x)
    return out


def analytic_signal(x: np.ndarray) -> np.ndarray:
    """Analytic signal via the discrete spectral method (along the last axis).

    Negative-frequency bins are zeroed, positive ones doubled; DC and, for
    even lengths, the Nyquist bin are kept as-is.  The real part of the
    result is then overwritten with the input so it matches exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("analytic signal needs at least two samples")
    spectrum = np.fft.fft(x, axis=-1)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    z = np.fft.ifft(spectrum * h, axis=-1)
    return x + 1j * z.imag


def envelope_fine_structure(sc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Temporal envelope ``|z|`` and fine structure ``cos(angle(z))`` of a subband.

    The four-quadrant phase is used so that ``e * f`` reconstructs the
    subband and its zero crossings carry over to the fine structure.
    """
    z = analytic_signal(sc)
    return np.abs(z), np.cos(np.angle(z))


def frame_samples(frame_length: float, sample_rate: int) -> int:
    n = int(round(frame_length * sample_rate))
    if n < 1:
        raise ValueError(f"frame of {frame_length} s is shorter than one sample at {sample_rate} Hz")
    return n


def frame_average(x: np.ndarray, frame_length: float, sample_rate: int) -> np.ndarray:
    """Means over non-overlapping frames along the last axis; the remainder is dropped."""
    x = np.asarray(x, dtype=np.float64)
    m = frame_samples(frame_length, sample_rate)
    n_frames = x.shape[-1] // m
    if n_frames == 0:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one {m}-sample frame")
    trimmed = x[..., : n_frames * m]
    return trimmed.reshape(*x.shape[:-1], n_frames, m).mean(axis=-1)


def log_scale_envelope(ec: np.ndarray) -> np.ndarray:
    ec = np.asarray(ec, dtype=np.float64)
    return np.log10(np.maximum(ec, LOG_FLOOR))


def log_scale_fine_structure(fc: np.ndarray) -> np.ndarray:
    """``sgn(F) * log10|F|`` with ``|F|`` clamped to ``[1e-5, 1]``; sgn(0) = 0."""
    fc = np.asarray(fc, dtype=np.float64)
    return np.sign(fc) * np.log10(np.clip(np.abs(fc), LOG_FLOOR, 1.0))


def stft_log_magnitude(w: Waveform, frame_length: float = DEFAULT_STFT_FRAME_LENGTH) -> Representation:
    """Log-magnitude STFT with a Hann window and hop equal to the window length."""
    m = frame_samples(frame_length, w.sample_rate)
    if m < 2:
        raise ValueError("STFT frame must span at least two samples")
    x = np.asarray(w.samples, dtype=np.float64)
    n_frames = x.size // m
    if n_frames == 0:
        raise ValueError(f"signal of {x.size} samples is shorter than one {m}-sample STFT frame")
    frames = x[: n_frames * m].reshape(n_frames, m)
    window = signal.get_window("hann", m)
    # m // 2 + 1 one-sided bins: 32 for the 62-sample default frame
    mag = np.abs(np.fft.rfft(frames * window, axis=-1)).T
    return Representation(Kind.STFT, np.log10(np.maximum(mag, LOG_FLOOR)), frame_length, w.sample_rate)


def envelope_and_fine_structure(
    w: Waveform, fb: Filterbank, frame_length: float = DEFAULT_FRAME_LENGTH
) -> tuple[Representation, Representation]:
    """Both auditory representations from one filterbank pass."""
    sub = filter_subbands(w, fb)
    env, tfs = envelope_fine_structure(sub)
    env_rep = Representation(
        Kind.ENVELOPE,
        log_scale_envelope(frame_average(env, frame_length, w.sample_rate)),
        frame_length,
        w.sample_rate,
    )
    tfs_rep = Representation(
        Kind.FINE_STRUCTURE,
        log_scale_fine_structure(frame_average(tfs, frame_length, w.sample_rate)),
        frame_length,
        w.sample_rate,
    )
    return env_rep, tfs_rep


def compute_representation(
    w: Waveform,
    kind: Kind | str,
    *,
    n_bands: int = DEFAULT_BANDS,
    f_lo: float = DEFAULT_F_LO,
    f_hi: float = DEFAULT_F_HI,
    frame_length: float = DEFAULT_FRAME_LENGTH,
    stft_frame_length: float = DEFAULT_STFT_FRAME_LENGTH,
    filterbank: Filterbank | None = None,
) -> Representation:
    kind = Kind(kind)
    if kind is Kind.STFT:
        return stft_log_magnitude(w, stft_frame_length)
    fb = filterbank or design_filterbank(n_bands, f_lo, f_hi, w.sample_rate)
    env, tfs = envelope_and_fine_structure(w, fb, frame_length)
    return env if kind is Kind.ENVELOPE else tfs


# Representation container: little-endian header then row-major float32 values.
#   magic  4s   b"TFSR"
#   version H   1
#   kind   H    0 envelope, 1 fine structure, 2 stft
#   K      I
#   L      I
#   frame_length d  (seconds)
#   sample_rate  I
_REP_MAGIC = b"TFSR"
_REP_VERSION = 1
_REP_HEADER = struct.Struct("<4sHHIIdI")


def representation_to_bytes(rep: Representation) -> bytes:
    k, n = rep.values.shape
    header = _REP_HEADER.pack(
        _REP_MAGIC, _REP_VERSION, rep.kind.code, k, n, float(rep.frame_length), int(rep.sample_rate)
    )
    return header + np.ascontiguousarray(rep.values, dtype="<f4").tobytes()


def representation_from_bytes(data: bytes) -> Representation:
    if len(data) < _REP_HEADER.size:
        raise ValueError("truncated representation container")
    magic, version, code, k, n, frame_length, rate = _REP_HEADER.unpack_from(data)
    if magic != _REP_MAGIC:
        raise ValueError("not a representation container")
    if version != _REP_VERSION:
        raise ValueError(f"unsupported representation container version {version}")
    body = data[_REP_HEADER.size :]
    if len(body) != 4 * k * n:
        raise ValueError(f"container body has {len(body)} bytes, expected {4 * k * n}")
    values = np.frombuffer(body, dtype="<f4").reshape(k, n).astype(np.float64)
    return Representation(Kind.from_code(code), values, frame_length, rate)


def save_representation(rep: Representation, path) -> None:
    Path(path).write_bytes(representation_to_bytes(rep))


def load_representation(path) -> Representation:
    return representation_from_bytes(Path(path).read_bytes())


def save_representation_csv(rep: Representation, path) -> None:
    np.savetxt(path, rep.values, delimiter=",", fmt="%.6g")
