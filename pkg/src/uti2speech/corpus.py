"""TaL80-style corpus handling: raw scanline I/O, splits, synthetic generation."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigurationError, InsufficientDataError, MalformedFileError

SCANLINES = 64
SAMPLES_PER_LINE = 842
FRAME_BYTES = SCANLINES * SAMPLES_PER_LINE
DEFAULT_FPS = 81.5
SYNTH_SAMPLE_RATE = 22050

# Shared read sentences reserved for testing across all speakers.
TEST_UTTERANCE_IDS = frozenset(f"{i:03d}_xaud" for i in range(5, 15))

MIN_NON_TEST_UTTERANCES = 12


@dataclass
class AudioClip:
    """Mono waveform with samples on the [-1, 1] scale."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise MalformedFileError("audio must be a 1-D sample sequence")
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0 + 1e-9:
            raise MalformedFileError(f"samples exceed [-1, 1] (peak {peak:.4f})")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class UltrasoundRecording:
    """One utterance: raw scanline frames plus the synchronized audio."""

    speaker_id: str
    utterance_id: str
    frames: np.ndarray
    fps: float
    audio: AudioClip
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (SCANLINES, SAMPLES_PER_LINE):
            raise MalformedFileError(
                f"frames must be T x {SCANLINES} x {SAMPLES_PER_LINE}, got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise MalformedFileError("recording must contain at least one frame")
        if self.fps <= 0:
            raise ConfigurationError(f"fps must be positive, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class CorpusSplit:
    """Disjoint train/dev/test partition of one speaker's utterance ids."""

    train: list[str]
    dev: list[str]
    test: list[str]

    def __post_init__(self):
        sets = [set(self.train), set(self.dev), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise InsufficientDataError("split partitions must be pairwise disjoint")

    def all_utterances(self) -> list[str]:
        return list(self.train) + list(self.dev) + list(self.test)


def _parse_params(params_path: Path) -> dict:
    if not params_path.exists():
        raise ConfigurationError(f"missing params sidecar: {params_path}")
    values = {}
    for line in params_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#") or ":" not in line:
            continue
        key, raw = line.split(":", 1)
        values[key.strip()] = raw.strip()
    if "fps" not in values:
        raise ConfigurationError(f"params sidecar lacks required key 'fps': {params_path}")
    try:
        fps = float(values["fps"])
        scanlines = int(values.get("scanlines", SCANLINES))
        samples_per_line = int(values.get("samples_per_line", SAMPLES_PER_LINE))
    except ValueError as exc:
        raise ConfigurationError(f"malformed params sidecar {params_path}: {exc}") from exc
    if scanlines != SCANLINES or samples_per_line != SAMPLES_PER_LINE:
        raise ConfigurationError(
            f"unsupported geometry {scanlines}x{samples_per_line} in {params_path}"
        )
    return {"fps": fps, "scanlines": scanlines, "samples_per_line": samples_per_line}


def _load_wav(audio_path: Path) -> AudioClip:
    sample_rate, raw = wavfile.read(audio_path)
    if raw.ndim > 1:
        raw = raw[:, 0]
    if np.issubdtype(raw.dtype, np.integer):
        samples = raw.astype(np.float64) / float(np.iinfo(raw.dtype).max)
    else:
        samples = raw.astype(np.float64)
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 0:
        samples = samples / peak
    return AudioClip(samples=samples, sample_rate=int(sample_rate))


def load_recording(
    ultrasound_path: str | Path,
    audio_path: str | Path,
    params_path: str | Path | None = None,
) -> UltrasoundRecording:
    """Load one utterance from its .ult/.wav/.param triple.

    Frames are reshaped to T x 64 x 842 in recording order; audio is
    peak-normalized.  Streams are truncated to their common duration, and a
    mismatch beyond 0.5 s is recorded as an alignment warning in metadata.
    """
    ultrasound_path = Path(ultrasound_path)
    audio_path = Path(audio_path)
    if params_path is None:
        params_path = ultrasound_path.with_suffix(".param")
    params = _parse_params(Path(params_path))
    fps = params["fps"]

    raw = ultrasound_path.read_bytes()
    if len(raw) == 0 or len(raw) % FRAME_BYTES != 0:
        raise MalformedFileError(
            f"{ultrasound_path}: {len(raw)} bytes is not a multiple of {FRAME_BYTES}"
        )
    frames = np.frombuffer(raw, dtype=np.uint8).reshape(-1, SCANLINES, SAMPLES_PER_LINE)

    audio = _load_wav(audio_path)
    metadata: dict = {}
    mismatch = abs(frames.shape[0] / fps - audio.duration)
    if mismatch > 0.5:
        metadata["alignment_warning"] = (
            f"ultrasound/audio duration mismatch of {mismatch:.3f} s before truncation"
        )

    # Trust recorded timestamps; truncate the longer stream to the common duration.
    frames_from_audio = int(audio.duration * fps)
    if frames_from_audio < frames.shape[0]:
        frames = frames[: max(1, frames_from_audio)]
    else:
        keep = min(audio.samples.size, int(round(frames.shape[0] / fps * audio.sample_rate)))
        audio = AudioClip(samples=audio.samples[:keep], sample_rate=audio.sample_rate)

    return UltrasoundRecording(
        speaker_id=ultrasound_path.parent.name or "unknown",
        utterance_id=ultrasound_path.stem,
        frames=frames,
        fps=fps,
        audio=audio,
        metadata=metadata,
    )


def store_recording(recording: UltrasoundRecording, directory: str | Path) -> dict[str, Path]:
    """Write a recording as the <utt>.ult / <utt>.param / <utt>.wav triple."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = recording.utterance_id
    ult_path = directory / f"{stem}.ult"
    param_path = directory / f"{stem}.param"
    wav_path = directory / f"{stem}.wav"

    ult_path.write_bytes(recording.frames.tobytes())
    param_path.write_text(
        f"fps: {recording.fps}\nscanlines: {SCANLINES}\nsamples_per_line: {SAMPLES_PER_LINE}\n"
    )
    pcm = np.clip(recording.audio.samples, -1.0, 1.0)
    wavfile.write(wav_path, recording.audio.sample_rate, (pcm * 32767.0).astype(np.int16))
    return {"ult": ult_path, "param": param_path, "wav": wav_path}


def split_corpus(recordings: list[UltrasoundRecording], seed: int) -> CorpusSplit:
    """Partition one speaker's utterances into train/dev/test.

    The designated shared sentences go to test; the remainder is shuffled
    with `seed` and split 9:1 into train and dev.
    """
    speakers = {r.speaker_id for r in recordings}
    if len(speakers) > 1:
        raise InsufficientDataError(f"recordings span multiple speakers: {sorted(speakers)}")
    ids = sorted(r.utterance_id for r in recordings)
    test = [u for u in ids if u in TEST_UTTERANCE_IDS]
    remainder = [u for u in ids if u not in TEST_UTTERANCE_IDS]
    if len(remainder) < MIN_NON_TEST_UTTERANCES:
        raise InsufficientDataError(
            f"need at least {MIN_NON_TEST_UTTERANCES} non-test utterances, got {len(remainder)}"
        )
    rng = random.Random(seed)
    rng.shuffle(remainder)
    dev_size = max(1, int(len(remainder) / 10 + 0.5))
    dev = sorted(remainder[:dev_size])
    train = sorted(remainder[dev_size:])
    return CorpusSplit(train=train, dev=dev, test=test)


def write_split_manifest(splits: dict[str, CorpusSplit], path: str | Path) -> None:
    """Emit line-delimited {speaker, utterance, split} records."""
    path = Path(path)
    with path.open("w") as fh:
        for speaker in sorted(splits):
            split = splits[speaker]
            for name in ("train", "dev", "test"):
                for utterance in getattr(split, name):
                    fh.write(json.dumps({"speaker": speaker, "utterance": utterance, "split": name}) + "\n")


def read_split_manifest(path: str | Path) -> dict[str, CorpusSplit]:
    by_speaker: dict[str, dict[str, list[str]]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        buckets = by_speaker.setdefault(rec["speaker"], {"train": [], "dev": [], "test": []})
        buckets[rec["split"]].append(rec["utterance"])
    return {
        speaker: CorpusSplit(train=b["train"], dev=b["dev"], test=b["test"])
        for speaker, b in by_speaker.items()
    }


# Synthetic corpus: three horizontal bands carry slow latent trajectories.
# The audio is a sum of three sinusoids whose frequencies are affine in the
# bands' spatial averages, over a three-band harmonic-comb carrier (period =
# one frame hop) whose per-band amplitudes are affine in the same averages.
# Because the comb repeats exactly once per analysis hop, its windowed
# spectrum is identical at every frame position, so every mel bin is a
# deterministic, smooth function of the current frame and the mapping stays
# learnable at desk scale.
_BAND_ROWS = ((0, 22), (22, 43), (43, 64))
# Sweeps jointly cover 170 Hz - 1.75 kHz; staying above ~170 Hz keeps them
# clear of phase-sensitive DC-mirror overlap.
_OSC_BASE_HZ = (170.0, 430.0, 950.0)
_OSC_SPAN_HZ = (260.0, 520.0, 800.0)
_OSC_AMPLITUDE = (0.22, 0.16, 0.1)
_COMB_BASE_AMPLITUDE = 0.05
_COMB_BAND_EDGES_HZ = (0.0, 430.0, 1450.0)
_COMB_GAIN_RANGE = (0.25, 1.8)
_COMB_WAVEFORM_SEED = 20240081  # fixed: the carrier is a constant of the law
_MIX_SCALE = 0.9 / (sum(_OSC_AMPLITUDE) + 6.0 * _COMB_BASE_AMPLITUDE)


def band_averages(frames: np.ndarray) -> np.ndarray:
    """Per-frame spatial averages of the three bands, normalized to [0, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    cols = [frames[:, lo:hi, :].mean(axis=(1, 2)) / 255.0 for lo, hi in _BAND_ROWS]
    return np.stack(cols, axis=1)


def oscillator_frequencies(frames: np.ndarray) -> np.ndarray:
    """T x 3 sinusoid frequencies implied by a frame sequence."""
    averages = band_averages(frames)
    return np.asarray(_OSC_BASE_HZ) + averages * np.asarray(_OSC_SPAN_HZ)


def _comb_waveforms(period: int, sample_rate: int) -> np.ndarray:
    """Three band-limited unit-RMS waveforms with period exactly `period`."""
    rng = np.random.default_rng(_COMB_WAVEFORM_SEED)
    bins = period // 2 + 1
    spectrum = rng.uniform(0.5, 1.0, bins) * np.exp(2j * np.pi * rng.uniform(0.0, 1.0, bins))
    spectrum[0] = 0.0
    line_hz = np.arange(bins) * sample_rate / period
    edges = list(_COMB_BAND_EDGES_HZ) + [sample_rate / 2.0 + 1.0]
    waves = np.empty((3, period))
    for k in range(3):
        banded = np.where((line_hz >= edges[k]) & (line_hz < edges[k + 1]), spectrum, 0.0)
        wave = np.fft.irfft(banded, n=period)
        waves[k] = wave / np.sqrt(np.mean(wave**2))
    return waves


def _render_audio(frames: np.ndarray, fps: float, sample_rate: int) -> np.ndarray:
    hop = int(round(sample_rate / fps))
    n_frames = frames.shape[0]
    n_samples = n_frames * hop
    positions = np.arange(n_samples)
    frame_centers = (np.arange(n_frames) + 0.5) * hop
    averages = band_averages(frames)

    freqs = oscillator_frequencies(frames)
    per_sample = np.empty((n_samples, 3))
    for k in range(3):
        per_sample[:, k] = np.interp(positions, frame_centers, freqs[:, k])
    phases = np.cumsum(2.0 * np.pi * per_sample / sample_rate, axis=0)
    total = (np.sin(phases) * np.asarray(_OSC_AMPLITUDE)).sum(axis=1)

    gain_lo, gain_hi = _COMB_GAIN_RANGE
    for k, wave in enumerate(_comb_waveforms(hop, sample_rate)):
        comb = np.tile(wave, n_frames)
        gain = _COMB_BASE_AMPLITUDE * (gain_lo + (gain_hi - gain_lo) * averages[:, k])
        total += comb * np.interp(positions, frame_centers, gain)
    return _MIX_SCALE * total


def generate_synthetic_corpus(
    seed: int,
    n_utterances: int,
    frame_count_range: tuple[int, int],
    speaker_id: str = "synth",
    fps: float = DEFAULT_FPS,
    sample_rate: int = SYNTH_SAMPLE_RATE,
) -> list[UltrasoundRecording]:
    """Generate a fully reproducible desk-scale corpus for one speaker."""
    lo, hi = frame_count_range
    if n_utterances < 1:
        raise InsufficientDataError("n_utterances must be >= 1")
    if not (1 <= lo <= hi):
        raise ConfigurationError(f"invalid frame count range ({lo}, {hi})")

    rng = np.random.default_rng(seed)
    recordings = []
    for index in range(n_utterances):
        n_frames = int(rng.integers(lo, hi + 1))
        # Slow trajectories: a fast-moving sweep smears inside the analysis
        # window, which a single frame cannot encode.
        cycles = rng.uniform(0.3, 1.2, size=3)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
        t = np.arange(n_frames) / n_frames
        latents = 0.5 + 0.45 * np.sin(2.0 * np.pi * np.outer(t, cycles) + phases)

        texture = rng.integers(-18, 19, size=(SCANLINES, SAMPLES_PER_LINE)).astype(np.float64)
        frames = np.empty((n_frames, SCANLINES, SAMPLES_PER_LINE), dtype=np.uint8)
        for k, (row_lo, row_hi) in enumerate(_BAND_ROWS):
            band = 64.0 + 112.0 * latents[:, k][:, None, None] + texture[None, row_lo:row_hi, :]
            frames[:, row_lo:row_hi, :] = np.clip(np.round(band), 0, 255).astype(np.uint8)

        samples = _render_audio(frames, fps, sample_rate)
        recordings.append(
            UltrasoundRecording(
                speaker_id=speaker_id,
                utterance_id=f"{index + 1:03d}_xaud",
                frames=frames,
                fps=fps,
                audio=AudioClip(samples=samples, sample_rate=sample_rate),
            )
        )
    return recordings


def load_speaker_directory(directory: str | Path) -> list[UltrasoundRecording]:
    """Load every .ult/.wav/.param triple under one speaker directory."""
    directory = Path(directory)
    recordings = []
    for ult_path in sorted(directory.glob("*.ult")):
        recordings.append(
            load_recording(ult_path, ult_path.with_suffix(".wav"), ult_path.with_suffix(".param"))
        )
    return recordings
