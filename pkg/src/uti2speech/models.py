"""Frame-to-mel architectures: 2D-CNN baseline, Conformer Base, Conformer + bi-LSTM."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ConfigurationError, MalformedFileError, ShapeError

FRAME_STEPS = 64
FRAME_WIDTH = 128
OUTPUT_DIM = 80

KIND_BASELINE_CNN = "baseline_cnn"
KIND_CONFORMER_BASE = "conformer_base"
KIND_CONFORMER_BILSTM = "conformer_bilstm"
MODEL_KINDS = (KIND_BASELINE_CNN, KIND_CONFORMER_BASE, KIND_CONFORMER_BILSTM)


@dataclass
class ConformerBlockConfig:
    encoder_dim: int = 256
    attention_heads: int = 32
    conv_kernel: int = 31
    ff_expansion: int = 3
    dropout: float = 0.1

    def __post_init__(self):
        if self.encoder_dim % self.attention_heads != 0:
            raise ConfigurationError(
                f"encoder_dim {self.encoder_dim} not divisible by {self.attention_heads} heads"
            )
        if self.conv_kernel % 2 != 1:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelSpec:
    """Declarative description of one of the three architectures."""

    kind: str
    block: ConformerBlockConfig = field(default_factory=ConformerBlockConfig)
    bilstm_hidden: int = 256
    input_shape: tuple[int, int] = (FRAME_STEPS, FRAME_WIDTH)
    output_dim: int = OUTPUT_DIM

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if tuple(self.input_shape) != (FRAME_STEPS, FRAME_WIDTH):
            raise ConfigurationError(f"input must be {FRAME_STEPS}x{FRAME_WIDTH}")
        if self.output_dim != OUTPUT_DIM:
            raise ConfigurationError(f"output dimension must be {OUTPUT_DIM}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "block": vars(self.block).copy(),
            "bilstm_hidden": self.bilstm_hidden,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(
            kind=data["kind"],
            block=ConformerBlockConfig(**data["block"]),
            bilstm_hidden=data.get("bilstm_hidden", 256),
            input_shape=tuple(data.get("input_shape", (FRAME_STEPS, FRAME_WIDTH))),
            output_dim=data.get("output_dim", OUTPUT_DIM),
        )


# ---------------------------------------------------------------------------
# Beam-line sequence arrangement


@dataclass
class BeamlineSequence:
    """Scanlines of consecutive frames laid out as one long step sequence."""

    steps: np.ndarray
    partition_length: int = FRAME_STEPS

    def __post_init__(self):
        self.steps = np.asarray(self.steps)
        if self.steps.ndim != 2 or self.steps.shape[1] != FRAME_WIDTH:
            raise ShapeError(f"steps must be N x {FRAME_WIDTH}, got {self.steps.shape}")
        if self.steps.shape[0] % self.partition_length != 0:
            raise ShapeError(
                f"step count {self.steps.shape[0]} not divisible by {self.partition_length}"
            )

    @property
    def n_frames(self) -> int:
        return self.steps.shape[0] // self.partition_length


def frames_to_sequence(frames: np.ndarray) -> BeamlineSequence:
    """Concatenate scanlines in frame order; one 64-step window per frame."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[1:] != (FRAME_STEPS, FRAME_WIDTH):
        raise ShapeError(f"frames must be T x {FRAME_STEPS} x {FRAME_WIDTH}, got {frames.shape}")
    return BeamlineSequence(steps=frames.reshape(-1, FRAME_WIDTH))


def sequence_to_frames(sequence: BeamlineSequence) -> np.ndarray:
    return sequence.steps.reshape(-1, sequence.partition_length, FRAME_WIDTH)


# ---------------------------------------------------------------------------
# Conformer block


def _relative_position_encoding(length: int, dim: int, dtype, device) -> Tensor:
    """Sinusoidal embeddings for relative offsets length-1 .. -(length-1)."""
    positions = torch.arange(length - 1, -length, -1, dtype=dtype, device=device)
    inv_freq = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype, device=device) * (-np.log(10000.0) / dim)
    )
    angles = positions[:, None] * inv_freq[None, :]
    encoding = torch.zeros(positions.shape[0], dim, dtype=dtype, device=device)
    encoding[:, 0::2] = torch.sin(angles)
    encoding[:, 1::2] = torch.cos(angles)
    return encoding


class RelPositionAttention(nn.Module):
    """Multi-head self-attention with transformer-XL style relative encoding."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.norm = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.pos_proj = nn.Linear(dim, dim, bias=False)
        self.content_bias = nn.Parameter(torch.zeros(heads, self.head_dim))
        self.position_bias = nn.Parameter(torch.zeros(heads, self.head_dim))
        self.out_proj = nn.Linear(dim, dim)
        self.attn_dropout = nn.Dropout(dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        batch, length, dim = x.shape
        x = self.norm(x)
        q = self.q_proj(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(x).view(batch, length, self.heads, self.head_dim).transpose(1, 2)

        encoding = _relative_position_encoding(length, dim, x.dtype, x.device)
        pos = self.pos_proj(encoding).view(-1, self.heads, self.head_dim).permute(1, 2, 0)

        content = torch.matmul(q + self.content_bias[None, :, None, :], k.transpose(-2, -1))
        # Scores against every relative offset, then gathered per (query, key) pair.
        pos_scores = torch.matmul(q + self.position_bias[None, :, None, :], pos)
        rel_index = (
            torch.arange(length, device=x.device)[:, None]
            - torch.arange(length, device=x.device)[None, :]
        )
        gather_index = (length - 1 - rel_index).clamp(0, 2 * length - 2)
        gather_index = gather_index.expand(batch, self.heads, length, length)
        position = torch.gather(pos_scores, 3, gather_index)

        scores = (content + position) / np.sqrt(self.head_dim)
        probs = self.attn_dropout(torch.softmax(scores, dim=-1))
        out = torch.matmul(probs, v).transpose(1, 2).reshape(batch, length, dim)
        return self.dropout(self.out_proj(out))


class FeedForwardModule(nn.Module):
    def __init__(self, dim: int, expansion: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, dim * expansion)
        self.out_proj = nn.Linear(dim * expansion, dim)
        self.activation = nn.SiLU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = self.dropout(self.activation(self.in_proj(self.norm(x))))
        return self.dropout(self.out_proj(x))


class ConvolutionModule(nn.Module):
    """Pointwise GLU expansion, depthwise conv, per-sample normalization, swish."""

    def __init__(self, dim: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, dim * 2)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        # Normalizes each feature over the step axis, so training batches and
        # single-frame inference see identical behavior.
        self.channel_norm = nn.InstanceNorm1d(dim, affine=True)
        self.activation = nn.SiLU()
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        x = nn.functional.glu(self.in_proj(self.norm(x)), dim=-1)
        x = self.depthwise(x.transpose(1, 2))
        x = self.activation(self.channel_norm(x)).transpose(1, 2)
        return self.dropout(self.out_proj(x))


class ConformerBlock(nn.Module):
    """Half-step FFN, self-attention, convolution, half-step FFN, layer norm."""

    def __init__(self, cfg: ConformerBlockConfig):
        super().__init__()
        self.ffn1 = FeedForwardModule(cfg.encoder_dim, cfg.ff_expansion, cfg.dropout)
        self.attention = RelPositionAttention(cfg.encoder_dim, cfg.attention_heads, cfg.dropout)
        self.conv = ConvolutionModule(cfg.encoder_dim, cfg.conv_kernel, cfg.dropout)
        self.ffn2 = FeedForwardModule(cfg.encoder_dim, cfg.ff_expansion, cfg.dropout)
        self.norm = nn.LayerNorm(cfg.encoder_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attention(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ffn2(x)
        return self.norm(x)


# ---------------------------------------------------------------------------
# Full architectures (batch of frames in, one mel frame per input frame out)


class ConformerBase(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        dim = spec.block.encoder_dim
        self.input_proj = nn.Linear(FRAME_WIDTH, dim)
        self.block = ConformerBlock(spec.block)
        self.post_proj = nn.Linear(dim, dim)
        self.output = nn.Linear(FRAME_STEPS * dim, spec.output_dim)

    def forward(self, frames: Tensor) -> Tensor:
        _check_frame_batch(frames)
        x = self.input_proj(frames)
        x = self.block(x)
        x = self.post_proj(x)
        return self.output(x.flatten(1))


class ConformerBiLSTM(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        dim = spec.block.encoder_dim
        hidden = spec.bilstm_hidden
        self.input_proj = nn.Linear(FRAME_WIDTH, dim)
        self.block = ConformerBlock(spec.block)
        self.bilstm = nn.LSTM(
            input_size=dim,
            hidden_size=hidden,
            num_layers=2,
            batch_first=True,
            bidirectional=True,
        )
        self.post_proj = nn.Linear(hidden * 2, dim)
        self.output = nn.Linear(FRAME_STEPS * dim, spec.output_dim)

    def forward(self, frames: Tensor) -> Tensor:
        _check_frame_batch(frames)
        x = self.input_proj(frames)
        x = self.block(x)
        x, _ = self.bilstm(x)
        x = self.post_proj(x)
        return self.output(x.flatten(1))


class BaselineCNN(nn.Module):
    """Conv/pool stack plus dense layers, sized to the published budget."""

    DENSE_HIDDEN = 238

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 32, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 48, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(48, 96, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(96, 128, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        flat = 128 * (FRAME_STEPS // 8) * (FRAME_WIDTH // 8)
        self.dense = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, self.DENSE_HIDDEN),
            nn.ReLU(),
            nn.Linear(self.DENSE_HIDDEN, spec.output_dim),
        )

    def forward(self, frames: Tensor) -> Tensor:
        _check_frame_batch(frames)
        return self.dense(self.features(frames.unsqueeze(1)))


def _check_frame_batch(frames: Tensor) -> None:
    if frames.ndim != 3 or frames.shape[1:] != (FRAME_STEPS, FRAME_WIDTH):
        raise ShapeError(
            f"expected batch x {FRAME_STEPS} x {FRAME_WIDTH} frames, got {tuple(frames.shape)}"
        )


_MODEL_CLASSES = {
    KIND_BASELINE_CNN: BaselineCNN,
    KIND_CONFORMER_BASE: ConformerBase,
    KIND_CONFORMER_BILSTM: ConformerBiLSTM,
}


def build_model(spec: ModelSpec, seed: int | None = None) -> nn.Module:
    if seed is not None:
        torch.manual_seed(seed)
    return _MODEL_CLASSES[spec.kind](spec)


def count_parameters(spec_or_model: ModelSpec | nn.Module) -> int:
    """Exact count of trainable scalars."""
    model = spec_or_model
    if isinstance(spec_or_model, ModelSpec):
        model = build_model(spec_or_model)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def predict_mel(model: nn.Module, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Frame-level inference: T x 64 x 128 frames -> T x 80 predictions."""
    model.eval()
    dtype = next(model.parameters()).dtype
    outputs = []
    with torch.no_grad():
        for start in range(0, frames.shape[0], batch_size):
            chunk = torch.as_tensor(frames[start : start + batch_size], dtype=dtype)
            outputs.append(model(chunk).numpy())
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# Checkpoints: named-weight archive plus manifest


def save_checkpoint(
    model: nn.Module, spec: ModelSpec, path: str | Path, extra: dict | None = None
) -> None:
    """Write a zip of manifest.json plus one little-endian f32 blob per weight."""
    state = model.state_dict()
    manifest = {
        "spec": spec.to_dict(),
        "param_count": count_parameters(model),
        "weights": {name: list(tensor.shape) for name, tensor in state.items()},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as archive:
        archive.writestr("manifest.json", json.dumps(manifest, indent=2))
        for name, tensor in state.items():
            buffer = io.BytesIO()
            buffer.write(tensor.detach().cpu().numpy().astype("<f4").tobytes())
            archive.writestr(f"weights/{name}.bin", buffer.getvalue())


def load_checkpoint(path: str | Path) -> tuple[nn.Module, ModelSpec, dict]:
    with zipfile.ZipFile(path, "r") as archive:
        manifest = json.loads(archive.read("manifest.json"))
        spec = ModelSpec.from_dict(manifest["spec"])
        model = build_model(spec)
        state = {}
        for name, shape in manifest["weights"].items():
            raw = archive.read(f"weights/{name}.bin")
            array = np.frombuffer(raw, dtype="<f4").reshape(shape)
            state[name] = torch.as_tensor(array.copy(), dtype=torch.float32)
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise MalformedFileError(f"checkpoint {path} lacks weights: {sorted(missing)[:3]}...")
    model.load_state_dict(state)
    model.eval()
    return model, spec, manifest.get("extra", {})
