"""Signal processing: frame resizing, mel analysis, cepstra, MCD, anchors."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

from .corpus import AudioClip, DEFAULT_FPS
from .errors import (
    DegenerateStatsError,
    IncompatibleInputError,
    InsufficientAudioError,
    MalformedFileError,
    NumericInputError,
    ShapeError,
)

N_MELS = 80
N_FFT = 1024
MEL_FLOOR = 1e-5
TARGET_COLUMNS = 128
N_CEPSTRA = 13

_MEL_MAGIC = b"UMEL"
_MEL_VERSION = 1


# ---------------------------------------------------------------------------
# Frame preprocessing


def normalize_pixels(frame: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values to [-1, 1] via x/127.5 - 1."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.min() < 0 or frame.max() > 255:
        raise NumericInputError("pixel values must lie in [0, 255]")
    return frame / 127.5 - 1.0


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Catmull-Rom cubic convolution kernel."""
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    out[near] = (a + 2.0) * x[near] ** 3 - (a + 3.0) * x[near] ** 2 + 1.0
    out[far] = a * x[far] ** 3 - 5.0 * a * x[far] ** 2 + 8.0 * a * x[far] - 4.0 * a
    return out


def _bicubic_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Edge-clamped source indices (4, n_out) and weights for 1-D resampling."""
    scale = n_in / n_out
    x = (np.arange(n_out) + 0.5) * scale - 0.5
    x0 = np.floor(x).astype(int)
    t = x - x0
    offsets = np.arange(-1, 3)[:, None]
    indices = np.clip(x0[None, :] + offsets, 0, n_in - 1)
    weights = _cubic_kernel(offsets - t[None, :])
    return indices, weights


def resize_bicubic(frame: np.ndarray, n_out: int = TARGET_COLUMNS) -> np.ndarray:
    """Resample along the echo-sample axis only, with a Catmull-Rom kernel.

    Rows are untouched (the scanline count is already the target); columns are
    interpolated with the a = -0.5 cubic convolution kernel, edge-clamped.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"expected a 2-D frame, got shape {frame.shape}")
    if frame.shape[1] < 4:
        raise ShapeError("need at least 4 columns for bicubic interpolation")
    if not np.all(np.isfinite(frame)):
        raise NumericInputError("frame contains non-finite values")
    if frame.shape[1] == n_out:
        return frame.copy()
    indices, weights = _bicubic_taps(frame.shape[1], n_out)
    out = np.zeros((frame.shape[0], n_out), dtype=np.float64)
    for tap in range(4):
        out += frame[:, indices[tap]] * weights[tap]
    return out


def preprocess_frames(frames: np.ndarray) -> np.ndarray:
    """Raw uint8 T x 64 x 842 frames -> T x 64 x 128 floats in [-1, 1]."""
    normalized = normalize_pixels(frames)
    indices, weights = _bicubic_taps(normalized.shape[-1], TARGET_COLUMNS)
    out = np.zeros(normalized.shape[:-1] + (TARGET_COLUMNS,), dtype=np.float64)
    for tap in range(4):
        out += normalized[..., indices[tap]] * weights[tap]
    # Bicubic overshoot can leave the nominal range slightly.
    return np.clip(out, -1.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Mel spectrograms


@dataclass
class MelStats:
    """Per-bin mean and standard deviation over a speaker's training set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != (N_MELS,) or self.std.shape != (N_MELS,):
            raise ShapeError(f"stats must be {N_MELS}-vectors")

    @classmethod
    def from_mels(cls, mels: list["MelSpectrogram"], std_floor: float = 1e-5) -> "MelStats":
        """Pool frames of the given mels; std is floored so bins that are
        constant over the training set (e.g. at the log floor) stay usable."""
        stacked = np.concatenate([np.asarray(m.values, dtype=np.float64) for m in mels], axis=0)
        return cls(mean=stacked.mean(axis=0), std=np.maximum(stacked.std(axis=0), std_floor))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MelStats":
        return cls(mean=np.asarray(data["mean"]), std=np.asarray(data["std"]))


@dataclass
class MelSpectrogram:
    """T x 80 log-mel matrix with explicit normalization bookkeeping."""

    values: np.ndarray
    normalized: bool = False
    stats_ref: MelStats | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise ShapeError(f"mel matrix must be T x {N_MELS}, got {self.values.shape}")
        if self.normalized and self.stats_ref is None:
            raise IncompatibleInputError("normalized mel requires stats_ref")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Center frequency in Hz of each triangular mel filter."""
    points = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(points[1:-1])


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular unit-peak filters on the mel scale, (n_mels, n_fft//2 + 1)."""
    fft_mels = hz_to_mel(np.arange(n_fft // 2 + 1) * sample_rate / n_fft)
    points = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    lower = points[:-2, None]
    center = points[1:-1, None]
    upper = points[2:, None]
    rising = (fft_mels[None, :] - lower) / (center - lower)
    falling = (upper - fft_mels[None, :]) / (upper - center)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def hop_for_fps(sample_rate: int, fps: float) -> int:
    return int(round(sample_rate / fps))


def _stft_magnitude(samples: np.ndarray, hop: int, n_frames: int, n_fft: int = N_FFT) -> np.ndarray:
    """Magnitude spectrogram with frames centered at t * hop, (n_frames, n_fft//2+1)."""
    window = scipy.signal.windows.hann(n_fft, sym=False)
    pad_left = n_fft // 2
    needed = (n_frames - 1) * hop + n_fft
    padded = np.zeros(pad_left + max(needed - pad_left, samples.size), dtype=np.float64)
    padded[pad_left : pad_left + samples.size] = samples
    offsets = np.arange(n_frames) * hop
    segments = padded[offsets[:, None] + np.arange(n_fft)[None, :]]
    return np.abs(np.fft.rfft(segments * window, axis=1))


def extract_mel(audio: AudioClip, fps: float, n_frames: int) -> MelSpectrogram:
    """Log-mel analysis with exactly one frame per ultrasound frame."""
    if audio.samples.size == 0:
        raise InsufficientAudioError("audio clip is empty")
    if fps <= 0:
        raise IncompatibleInputError(f"fps must be positive, got {fps}")
    hop = hop_for_fps(audio.sample_rate, fps)
    if audio.samples.size < hop:
        raise InsufficientAudioError(
            f"audio of {audio.samples.size} samples is shorter than one hop ({hop})"
        )
    magnitude = _stft_magnitude(audio.samples, hop, n_frames)
    filterbank = mel_filterbank(audio.sample_rate)
    mel = np.log(np.maximum(magnitude @ filterbank.T, MEL_FLOOR))
    return MelSpectrogram(values=mel)


def standardize_mel(mel: MelSpectrogram, stats: MelStats) -> MelSpectrogram:
    """Per-bin (x - mean) / std."""
    if mel.normalized:
        raise IncompatibleInputError("mel is already standardized")
    if np.any(stats.std <= 0):
        raise DegenerateStatsError("stats.std contains a non-positive bin")
    return MelSpectrogram(
        values=(mel.values - stats.mean) / stats.std, normalized=True, stats_ref=stats
    )


def destandardize_mel(mel: MelSpectrogram, stats: MelStats | None = None) -> MelSpectrogram:
    """Inverse of standardize_mel."""
    if not mel.normalized:
        raise IncompatibleInputError("mel is not standardized")
    stats = stats if stats is not None else mel.stats_ref
    if np.any(stats.std <= 0):
        raise DegenerateStatsError("stats.std contains a non-positive bin")
    return MelSpectrogram(values=mel.values * stats.std + stats.mean, normalized=False)


# ---------------------------------------------------------------------------
# Mel cepstra and MCD


def mel_cepstra(audio: AudioClip, fps: float = DEFAULT_FPS) -> np.ndarray:
    """Per-frame mel-cepstral coefficients c0..c12, same framing as extract_mel."""
    if audio.samples.size == 0:
        raise InsufficientAudioError("audio clip is empty")
    hop = hop_for_fps(audio.sample_rate, fps)
    if audio.samples.size < hop:
        raise InsufficientAudioError(
            f"audio of {audio.samples.size} samples is shorter than one hop ({hop})"
        )
    n_frames = audio.samples.size // hop
    log_mel = extract_mel(audio, fps, n_frames).values
    return scipy.fft.dct(log_mel, type=2, norm="ortho", axis=1)[:, :N_CEPSTRA]


def mcd_from_cepstra(reference: np.ndarray, synthesized: np.ndarray) -> float:
    """Mean per-frame mel-cepstral distortion in dB, excluding c0."""
    n = min(reference.shape[0], synthesized.shape[0])
    diff = reference[:n, 1:N_CEPSTRA] - synthesized[:n, 1:N_CEPSTRA]
    per_frame = (10.0 / np.log(10.0)) * np.sqrt(2.0 * np.sum(diff**2, axis=1))
    return float(per_frame.mean())


def mcd(reference: AudioClip, synthesized: AudioClip, fps: float = DEFAULT_FPS) -> float:
    """Mel-cepstral distortion between two waveforms; lower is better."""
    if reference.sample_rate != synthesized.sample_rate:
        raise IncompatibleInputError(
            f"sample rates differ: {reference.sample_rate} vs {synthesized.sample_rate}"
        )
    return mcd_from_cepstra(mel_cepstra(reference, fps), mel_cepstra(synthesized, fps))


# ---------------------------------------------------------------------------
# Anchor stimuli


def add_white_noise_anchor(audio: AudioClip, level: float, seed: int) -> AudioClip:
    """Reference plus zero-mean Gaussian noise of the given standard deviation."""
    if level < 0:
        raise NumericInputError(f"noise level must be >= 0, got {level}")
    noise = np.random.default_rng(seed).normal(0.0, level, size=audio.samples.shape)
    degraded = np.clip(audio.samples + noise, -1.0, 1.0)
    return AudioClip(samples=degraded, sample_rate=audio.sample_rate)


# ---------------------------------------------------------------------------
# Persistence and plots


def save_mel(mel: MelSpectrogram, path: str | Path) -> None:
    """Write the 16-byte header (magic, version, T, n_mels) plus f32 LE payload."""
    header = _MEL_MAGIC + np.array(
        [_MEL_VERSION, mel.values.shape[0], mel.values.shape[1]], dtype="<u4"
    ).tobytes()
    Path(path).write_bytes(header + mel.values.astype("<f4").tobytes())


def load_mel(path: str | Path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MEL_MAGIC:
        raise MalformedFileError(f"{path}: not a mel binary")
    version, n_frames, n_mels = np.frombuffer(raw[4:16], dtype="<u4")
    if version != _MEL_VERSION:
        raise MalformedFileError(f"{path}: unsupported mel binary version {version}")
    values = np.frombuffer(raw[16:], dtype="<f4")
    if values.size != n_frames * n_mels:
        raise MalformedFileError(f"{path}: payload size does not match header")
    return MelSpectrogram(values=values.reshape(n_frames, n_mels).astype(np.float64))


def plot_mel(mel: MelSpectrogram, path: str | Path, title: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 3))
    image = ax.imshow(mel.values.T, origin="lower", aspect="auto", interpolation="nearest")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
