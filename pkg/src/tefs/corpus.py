"""Speaker manifests, WAV ingestion and a synthetic labelled corpus."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

log = logging.getLogger(__name__)

WORKING_RATE = 16000
MANIFEST_HEADER = ["speaker_id", "audio_path", "label", "gender"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Speaker:
    id: str
    label: int  # 0 neurotypical, 1 dysarthric
    gender: str  # "F" or "M"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    speaker_id: str
    audio_path: Path
    label: int
    gender: str


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    working_rate: int = WORKING_RATE

    @property
    def speakers(self) -> list[Speaker]:
        seen: dict[str, Speaker] = {}
        for e in self.entries:
            seen.setdefault(e.speaker_id, Speaker(e.speaker_id, e.label, e.gender))
        return list(seen.values())

    def utterances(self, speaker_id: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.speaker_id == speaker_id]

    def write(self, path) -> None:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for e in self.entries:
                try:
                    audio = e.audio_path.relative_to(path.parent)
                except ValueError:
                    audio = e.audio_path
                writer.writerow([e.speaker_id, audio.as_posix(), e.label, e.gender])


def load_manifest(path, working_rate: int = WORKING_RATE) -> CorpusManifest:
    """Read and validate a ``speaker_id,audio_path,label,gender`` CSV.

    Relative audio paths resolve against the manifest's directory.  A speaker
    may list several utterances but must keep the same label and gender.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ManifestError(f"{path}: empty manifest")
    if [c.strip() for c in rows[0]] != MANIFEST_HEADER:
        raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")

    entries = []
    attrs: dict[str, tuple[int, str]] = {}
    pairs = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        sid, audio, label, gender = (c.strip() for c in row)
        if not sid:
            raise ManifestError(f"{path}:{lineno}: empty speaker_id")
        if label not in ("0", "1"):
            raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
        if gender not in ("F", "M"):
            raise ManifestError(f"{path}:{lineno}: gender must be F or M, got {gender!r}")
        audio_path = Path(audio)
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        if not audio_path.is_file():
            raise FileNotFoundError(f"{path}:{lineno}: audio file not found: {audio_path}")
        key = (sid, audio_path.resolve())
        if key in pairs:
            raise ManifestError(f"{path}:{lineno}: duplicate entry for speaker {sid!r} and {audio}")
        pairs.add(key)
        if attrs.setdefault(sid, (int(label), gender)) != (int(label), gender):
            raise ManifestError(f"{path}:{lineno}: speaker {sid!r} listed with conflicting label/gender")
        entries.append(ManifestEntry(sid, audio_path, int(label), gender))
    if not entries:
        raise ManifestError(f"{path}: manifest has no entries")
    return CorpusManifest(entries, working_rate)


def resample(x: np.ndarray, source_rate: int, target_rate: int) -> np.ndarray:
    """Band-limited downsampling with a Kaiser-windowed polyphase FIR."""
    if target_rate > source_rate:
        raise ValueError(f"upsampling from {source_rate} to {target_rate} Hz is not supported")
    if target_rate == source_rate:
        return x
    g = gcd(int(source_rate), int(target_rate))
    up, down = target_rate // g, source_rate // g
    # beta 8.6 puts the stopband below -80 dB
    return signal.resample_poly(x, up, down, window=("kaiser", 8.6))


def load_waveform(path, target_rate: int = WORKING_RATE) -> Waveform:
    """Read a PCM WAV file as mono float64 at ``target_rate``."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise ValueError(f"{path}: unsupported audio format ({exc})") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if target_rate == rate:
        return Waveform(x, rate)
    return Waveform(resample(x, rate, target_rate), target_rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, sample_rate, pcm)


# ---------------------------------------------------------------------------
# Synthetic corpus


@dataclass
class ClassParams:
    """Per-speaker draws are ``mean + spread * U(-1, 1)``."""

    pitch_std_hz: float
    pitch_std_spread: float
    mod_depth: float
    mod_depth_spread: float
    snr_db: float
    snr_spread: float


def _default_class0() -> ClassParams:
    return ClassParams(pitch_std_hz=22.0, pitch_std_spread=6.0, mod_depth=0.9,
                       mod_depth_spread=0.05, snr_db=30.0, snr_spread=5.0)


def _default_class1() -> ClassParams:
    return ClassParams(pitch_std_hz=6.0, pitch_std_spread=3.0, mod_depth=0.4,
                       mod_depth_spread=0.1, snr_db=12.0, snr_spread=3.0)


@dataclass
class SynthParams:
    sample_rate: int = 44100
    speaker_seconds: float = 30.0
    utterance_min_s: float = 1.0
    utterance_max_s: float = 3.0
    syllable_rate_hz: float = 4.0
    f0_male_hz: float = 115.0
    f0_female_hz: float = 205.0
    f0_speaker_spread_hz: float = 15.0
    rms: float = 0.05
    class0: ClassParams = field(default_factory=_default_class0)
    class1: ClassParams = field(default_factory=_default_class1)

    def validate(self) -> None:
        if self.sample_rate < 16000:
            raise ValueError("synthesis rate must be at least 16 kHz")
        if not 0 < self.utterance_min_s <= self.utterance_max_s:
            raise ValueError("need 0 < utterance_min_s <= utterance_max_s")
        if self.speaker_seconds < self.utterance_min_s:
            raise ValueError("speaker_seconds shorter than one utterance")
        if self.syllable_rate_hz <= 0 or self.rms <= 0:
            raise ValueError("syllable_rate_hz and rms must be positive")
        for cp in (self.class0, self.class1):
            lo_depth, hi_depth = cp.mod_depth - cp.mod_depth_spread, cp.mod_depth + cp.mod_depth_spread
            if not 0.0 <= lo_depth <= hi_depth <= 1.0:
                raise ValueError("modulation depth range must lie in [0, 1]")
            if cp.pitch_std_hz - cp.pitch_std_spread < 0:
                raise ValueError("pitch std range must be non-negative")
            if min(cp.pitch_std_spread, cp.mod_depth_spread, cp.snr_spread) < 0:
                raise ValueError("spreads must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth parameter(s): {', '.join(sorted(unknown))}")
        d = dict(d)
        for key in ("class0", "class1"):
            if key in d:
                d[key] = ClassParams(**{**asdict(getattr(cls(), key)), **d[key]})
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "SynthParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


# Spanish cardinal vowels (F1, F2, F3) in Hz.
VOWEL_FORMANTS = np.array([
    [800.0, 1300.0, 2500.0],  # a
    [450.0, 1900.0, 2600.0],  # e
    [300.0, 2300.0, 3000.0],  # i
    [480.0, 900.0, 2500.0],   # o
    [320.0, 800.0, 2400.0],   # u
])
FORMANT_BANDWIDTHS = np.array([80.0, 100.0, 140.0])


def _smooth_noise(rng, n, fs, cutoff_hz):
    """Unit-variance low-pass Gaussian noise."""
    sos = signal.butter(2, cutoff_hz, btype="low", output="sos", fs=fs)
    pad = int(fs / cutoff_hz)
    v = signal.sosfilt(sos, rng.standard_normal(n + 2 * pad))[2 * pad :]
    return (v - v.mean()) / (v.std() + 1e-12)


def _formant_filter(x, formants, fs):
    for f, bw in zip(formants, FORMANT_BANDWIDTHS):
        r = np.exp(-np.pi * bw / fs)
        theta = 2 * np.pi * f / fs
        a = [1.0, -2 * r * np.cos(theta), r * r]
        x = signal.lfilter([1.0 - r], a, x)
    return x


def synth_utterance(rng: np.random.Generator, duration: float, f0: float, pitch_std: float,
                    mod_depth: float, snr_db: float, params: SynthParams) -> np.ndarray:
    """One voiced pseudo-utterance: a syllabic sequence of vowels.

    The source is a band-limited harmonic pulse train following an
    intonation contour with standard deviation ``pitch_std``; each syllable
    is shaped by vowel formants and a raised-cosine amplitude envelope
    whose depth is ``mod_depth``.  High-passed aspiration noise is mixed in
    at ``snr_db`` relative to the voiced component.
    """
    fs = params.sample_rate
    n = int(round(duration * fs))
    t = np.arange(n) / fs

    contour = f0 + pitch_std * _smooth_noise(rng, n, fs, 3.0) - 10.0 * (t / max(duration, 1e-9) - 0.5)
    contour = np.clip(contour, 50.0, 500.0)
    phase = 2 * np.pi * np.cumsum(contour) / fs
    nyq_limit = min(7000.0, 0.45 * fs)
    source = np.zeros(n)
    for h in range(1, int(nyq_limit / contour.min()) + 1):
        active = h * contour < nyq_limit
        if not active.any():
            break
        source += np.where(active, np.sin(h * phase) / h, 0.0)

    # syllable boundaries with jittered durations
    n_syl = max(1, int(round(duration * params.syllable_rate_hz)))
    lengths = rng.uniform(0.7, 1.3, n_syl)
    edges = np.concatenate([[0], np.round(np.cumsum(lengths) / lengths.sum() * n).astype(int)])
    voiced = np.zeros(n)
    hump = np.zeros(n)
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        vowel = VOWEL_FORMANTS[rng.integers(len(VOWEL_FORMANTS))] * rng.uniform(0.93, 1.07)
        voiced[a:b] = _formant_filter(source[a:b], vowel, fs)
        hump[a:b] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(b - a) / (b - a))
    envelope = (1.0 - mod_depth) + mod_depth * hump
    voiced *= envelope

    noise = rng.standard_normal(n)
    sos = signal.butter(2, 1000.0, btype="high", output="sos", fs=fs)
    noise = signal.sosfilt(sos, noise) * envelope
    p_v = np.mean(voiced ** 2)
    p_n = np.mean(noise ** 2) + 1e-20
    noise *= np.sqrt(p_v / p_n * 10 ** (-snr_db / 10))

    y = voiced + noise
    return y * (params.rms / (np.sqrt(np.mean(y ** 2)) + 1e-20))


def _draw(rng, mean, spread):
    return mean + spread * rng.uniform(-1.0, 1.0)


def synth_corpus(n_speakers: int, seed: int, out_dir, params: SynthParams | None = None) -> CorpusManifest:
    """Write a balanced synthetic corpus plus ``manifest.csv`` under ``out_dir``.

    Half the speakers are class 1 (monotone pitch, flattened envelope,
    breathy).  Each class is split evenly between F and M.  Every speaker
    uses its own child seed, so output is reproducible file by file.
    """
    params = params or SynthParams()
    params.validate()
    if n_speakers < 2 or n_speakers % 2:
        raise ValueError(f"n_speakers must be a positive even number, got {n_speakers}")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    per_class = n_speakers // 2
    children = np.random.SeedSequence(seed).spawn(n_speakers)
    entries = []
    idx = 0
    for label, cp in ((0, params.class0), (1, params.class1)):
        for j in range(per_class):
            gender = "F" if j < (per_class + 1) // 2 else "M"
            sid = f"{'HC' if label == 0 else 'PD'}{j + 1:03d}"
            rng = np.random.default_rng(children[idx])
            idx += 1
            base = params.f0_female_hz if gender == "F" else params.f0_male_hz
            f0 = _draw(rng, base, params.f0_speaker_spread_hz)
            pitch_std = _draw(rng, cp.pitch_std_hz, cp.pitch_std_spread)
            depth = _draw(rng, cp.mod_depth, cp.mod_depth_spread)
            snr = _draw(rng, cp.snr_db, cp.snr_spread)
            total = 0.0
            u = 0
            while params.speaker_seconds - total >= params.utterance_min_s:
                dur = min(rng.uniform(params.utterance_min_s, params.utterance_max_s),
                          params.speaker_seconds - total)
                y = synth_utterance(rng, dur, f0, pitch_std, depth, snr, params)
                path = out_dir / "audio" / f"{sid}_{u:02d}.wav"
                write_wav(path, y, params.sample_rate)
                entries.append(ManifestEntry(sid, path, label, gender))
                total += dur
                u += 1
            log.debug("synthesised %s: %d utterances, %.1f s", sid, u, total)
    manifest = CorpusManifest(entries, WORKING_RATE)
    manifest.write(out_dir / "manifest.csv")
    return manifest
