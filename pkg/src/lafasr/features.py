"""Acoustic front end: FBANK, CMVN, SpecAugment, the synthetic accent corpus and manifests."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import FeatureConfig, SynthConfig
from .numcore import DimensionError

LOG_FLOOR = 1e-10
PREEMPH = 0.97
VAR_FLOOR = 1e-8


class EmptyInputError(ValueError):
    pass


class LabelError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x n_mel
    sample_rate: int = 16000
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class CmvnStats:
    mean: np.ndarray
    var: np.ndarray
    frame_count: int


@dataclass
class Utterance:
    id: str
    features: FeatureMatrix
    transcript: list[int]
    accent_label: int


# --------------------------------------------------------------------------
# FBANK
# --------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mel: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """(n_mel, n_fft//2+1) triangular filters equally spaced on the mel scale, 0 Hz to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mel + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None] - lo) / (mid - lo)
    down = (hi - freqs[None]) / (hi - mid)
    return np.clip(np.minimum(up, down), 0.0, None)


def fbank(waveform, sample_rate: int = 16000, n_mel: int = 80, frame_length_ms: float = 25.0,
          frame_shift_ms: float = 10.0) -> FeatureMatrix:
    """Log mel filterbank energies: pre-emphasis, Hann window, power spectrum, mel, log."""
    if sample_rate not in (8000, 16000):
        raise ValueError(f"unsupported sample rate {sample_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    win = int(round(sample_rate * frame_length_ms / 1000))
    hop = int(round(sample_rate * frame_shift_ms / 1000))
    if x.ndim != 1 or len(x) < win:
        raise EmptyInputError(f"waveform of {len(x)} samples is shorter than one {win}-sample window")
    x = np.concatenate([x[:1], x[1:] - PREEMPH * x[:-1]])
    n_frames = (len(x) - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    n_fft = 1 << (win - 1).bit_length()
    spec = np.abs(np.fft.rfft(frames * np.hanning(win), n=n_fft)) ** 2
    energies = spec @ mel_filterbank(n_mel, n_fft, sample_rate).T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)), sample_rate, frame_shift_ms, frame_length_ms)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        raw = w.readframes(w.getnframes())
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64)
        if w.getnchannels() > 1:
            data = data.reshape(-1, w.getnchannels())[:, 0]
        return data, w.getframerate()


# --------------------------------------------------------------------------
# normalisation and augmentation
# --------------------------------------------------------------------------


def compute_cmvn(feature_mats) -> CmvnStats:
    total = None
    sq = None
    count = 0
    for f in feature_mats:
        x = np.asarray(f.frames if isinstance(f, FeatureMatrix) else f, dtype=np.float64)
        s, s2 = x.sum(axis=0), (x * x).sum(axis=0)
        total = s if total is None else total + s
        sq = s2 if sq is None else sq + s2
        count += x.shape[0]
    if count == 0:
        raise EmptyInputError("CMVN needs at least one frame")
    mean = total / count
    var = np.maximum(sq / count - mean * mean, VAR_FLOOR)
    return CmvnStats(mean, var, count)


def apply_cmvn(features, stats: CmvnStats):
    x = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features)
    if x.shape[-1] != stats.mean.shape[0]:
        raise DimensionError(f"CMVN stats have {stats.mean.shape[0]} dims, features have {x.shape[-1]}")
    out = ((x - stats.mean) / np.sqrt(stats.var)).astype(x.dtype)
    if isinstance(features, FeatureMatrix):
        return FeatureMatrix(out, features.sample_rate, features.frame_shift_ms, features.frame_length_ms)
    return out


@dataclass
class AugmentPolicy:
    num_freq_masks: int = 1
    max_freq_width: int = 8
    num_time_masks: int = 1
    max_time_width: int = 4
    rng_seed: int = 0

    @classmethod
    def from_config(cls, cfg: FeatureConfig, seed: int) -> "AugmentPolicy":
        return cls(cfg.num_freq_masks, cfg.max_freq_width, cfg.num_time_masks, cfg.max_time_width, seed)


def sample_masks(shape: tuple[int, int], policy: AugmentPolicy) -> list[tuple[int, int, int]]:
    """(axis, start, width) for every mask; axis 1 = feature, axis 0 = time."""
    rng = np.random.default_rng(policy.rng_seed)
    t_len, f_len = shape
    masks = []
    for axis, count, max_w, extent in ((1, policy.num_freq_masks, policy.max_freq_width, f_len),
                                       (0, policy.num_time_masks, policy.max_time_width, t_len)):
        max_w = min(max_w, extent)
        for _ in range(count):
            if max_w <= 0:
                continue
            width = int(rng.integers(0, max_w + 1))
            start = int(rng.integers(0, extent - width + 1))
            masks.append((axis, start, width))
    return masks


def spec_augment(features: np.ndarray, policy: AugmentPolicy) -> np.ndarray:
    """Zero random frequency bands and time spans (train time only)."""
    out = np.array(features, copy=True)
    for axis, start, width in sample_masks(out.shape, policy):
        if axis == 1:
            out[:, start:start + width] = 0.0
        else:
            out[start:start + width, :] = 0.0
    return out


# --------------------------------------------------------------------------
# synthetic accent corpus
# --------------------------------------------------------------------------


@dataclass
class SynthTables:
    templates: np.ndarray  # V x F, zero on the reserved sub-band
    perms: np.ndarray  # A x V accent-specific token permutations (row 0 identity)


_TABLES: dict = {}


def synth_tables(cfg: SynthConfig) -> SynthTables:
    key = (cfg.vocab_size, cfg.accents, cfg.feat_dim, cfg.subband, cfg.template_seed)
    if key not in _TABLES:
        rng = np.random.default_rng(cfg.template_seed)
        templates = rng.standard_normal((cfg.vocab_size, cfg.feat_dim))
        if cfg.subband:
            templates[:, cfg.feat_dim - cfg.subband:] = 0.0
        perms = np.stack([np.arange(cfg.vocab_size)] +
                         [rng.permutation(cfg.vocab_size) for _ in range(cfg.accents - 1)])
        _TABLES[key] = SynthTables(templates, perms)
    return _TABLES[key]


def synth_utterance(accent_id: int, rng_seed: int, cfg: SynthConfig, utt_id: str | None = None) -> Utterance:
    """A random token sequence rendered as noisy token templates with an accent signature.

    Each token emits ``frames_per_token`` frames of its template.  The accent
    adds ``accent_id * accent_offset`` to the reserved top ``subband`` feature
    dims and, when ``accent_warp`` > 0, blends every template with that of an
    accent-specific partner token.
    """
    if not 0 <= accent_id < cfg.accents:
        raise LabelError(f"accent id {accent_id} outside [0, {cfg.accents})")
    tables = synth_tables(cfg)
    rng = np.random.default_rng(rng_seed)
    lo, hi = cfg.len_range
    n = int(rng.integers(lo, hi + 1))
    tokens = rng.integers(1, cfg.vocab_size + 1, size=n)
    idx = tokens - 1
    frames = tables.templates[idx]
    if cfg.accent_warp:
        partner = tables.templates[tables.perms[accent_id][idx]]
        frames = (1.0 - cfg.accent_warp) * frames + cfg.accent_warp * partner
    frames = np.repeat(frames, cfg.frames_per_token, axis=0)
    if cfg.noise_std:
        frames = frames + rng.normal(0.0, cfg.noise_std, size=frames.shape)
    if cfg.subband:
        frames[:, cfg.feat_dim - cfg.subband:] += accent_id * cfg.accent_offset
    feats = FeatureMatrix(frames.astype(np.float32))
    return Utterance(utt_id or f"synth-{rng_seed}", feats, [int(t) for t in tokens], int(accent_id))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    utt_id: str
    source: str
    transcript: list[int]
    accent_id: int


def format_transcript(tokens) -> str:
    return " ".join(str(int(t)) for t in tokens)


def write_manifest(path: str | Path, records) -> None:
    lines = [f"{r.utt_id}\t{r.source}\t{format_transcript(r.transcript)}\t{r.accent_id}\n" for r in records]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        utt_id, source, transcript, accent = parts
        try:
            tokens = [int(t) for t in transcript.split()]
            accent_id = int(accent)
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: malformed transcript or accent id") from None
        records.append(ManifestRecord(utt_id, source, tokens, accent_id))
    return records


def load_utterance(rec: ManifestRecord, synth_cfg: SynthConfig, base_dir: str | Path | None = None) -> Utterance:
    """Materialise a manifest record: regenerate ``synth:<seed>`` or run FBANK on a WAV file."""
    if rec.source.startswith("synth:"):
        utt = synth_utterance(rec.accent_id, int(rec.source[6:]), synth_cfg, rec.utt_id)
        if rec.transcript and utt.transcript != rec.transcript:
            raise ManifestError(f"{rec.utt_id}: transcript does not match synthetic source {rec.source}")
        return utt
    path = Path(rec.source)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    samples, rate = read_wav(path)
    return Utterance(rec.utt_id, fbank(samples, rate, n_mel=synth_cfg.feat_dim), rec.transcript, rec.accent_id)


def frame_count(n_samples: int, sample_rate: int, frame_length_ms: float = 25.0, frame_shift_ms: float = 10.0) -> int:
    win = int(round(sample_rate * frame_length_ms / 1000))
    hop = int(round(sample_rate * frame_shift_ms / 1000))
    return (n_samples - win) // hop + 1 if n_samples >= win else 0


def mel_centers(n_mel: int, sample_rate: int) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mel + 2))[1:-1]

