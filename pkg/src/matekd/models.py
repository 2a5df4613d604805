"""Transformer encoders: teacher/student classifiers and the masked-LM generator.

Classifiers read the first (cls) position through an affine head. The
student additionally accepts relaxed inputs — per-position distributions
over the vocabulary — by multiplying the rows into the embedding matrix,
which keeps the whole path differentiable. The teacher is only ever
queried for logits on hard token ids and its output is detached.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .data import PAD_ID, Vocabulary


class ModelError(ValueError):
    """Raised on config violations and checkpoint mismatches."""


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_len: int = 16
    num_classes: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
                     "vocab_size", "max_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ModelError("hidden_dim must be divisible by num_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)


class EncoderBackbone(nn.Module):
    """Token + learned position embeddings feeding a transformer encoder."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.token_embed = nn.Embedding(config.vocab_size, config.hidden_dim)
        self.pos_embed = nn.Embedding(config.max_len, config.hidden_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=config.hidden_dim,
            nhead=config.num_heads,
            dim_feedforward=config.ffn_dim,
            dropout=config.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.num_layers,
                                             enable_nested_tensor=False)

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, L) token ids, or (B, L, K) relaxed rows over the vocabulary."""
        if x.ndim == 2:
            if x.shape[1] > self.config.max_len:
                raise ModelError(f"sequence length {x.shape[1]} exceeds max_len {self.config.max_len}")
            if padding_mask is None:
                padding_mask = x.eq(PAD_ID)
            emb = self.token_embed(x)
        elif x.ndim == 3:
            if x.shape[-1] != self.config.vocab_size:
                raise ModelError(f"relaxed rows have length {x.shape[-1]}, expected {self.config.vocab_size}")
            if x.shape[1] > self.config.max_len:
                raise ModelError(f"sequence length {x.shape[1]} exceeds max_len {self.config.max_len}")
            if padding_mask is None:
                padding_mask = x.detach().argmax(dim=-1).eq(PAD_ID)
            emb = x @ self.token_embed.weight
        else:
            raise ModelError(f"expected (B, L) ids or (B, L, K) rows, got ndim={x.ndim}")
        positions = torch.arange(x.shape[1], device=emb.device)
        emb = emb + self.pos_embed(positions)
        return self.encoder(emb, src_key_padding_mask=padding_mask)


class TransformerClassifier(nn.Module):
    """Sequence classifier: cls-position vector through one affine layer."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = EncoderBackbone(config)
        self.head = nn.Linear(config.hidden_dim, config.num_classes)

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.backbone(x, padding_mask)
        return self.head(h[:, 0])


class MaskedLMGenerator(nn.Module):
    """Masked language model emitting per-position vocabulary logits."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.backbone = EncoderBackbone(config)
        self.head = nn.Linear(config.hidden_dim, config.vocab_size)

    def forward(self, x: torch.Tensor, padding_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.backbone(x, padding_mask)
        return self.head(h)


@dataclass
class ModelBundle:
    """The three networks of a MATE-KD run, sharing one vocabulary."""

    teacher: TransformerClassifier
    student: TransformerClassifier
    generator: MaskedLMGenerator

    def __post_init__(self):
        sizes = {m.config.vocab_size for m in (self.teacher, self.student, self.generator)}
        if len(sizes) != 1:
            raise ModelError(f"teacher/student/generator vocab sizes differ: {sizes}")


def build_classifier(config: EncoderConfig, seed: int) -> TransformerClassifier:
    """Deterministically initialized classifier (seeds the global RNG)."""
    torch.manual_seed(seed)
    return TransformerClassifier(config)


def build_generator(config: EncoderConfig, seed: int) -> MaskedLMGenerator:
    torch.manual_seed(seed)
    return MaskedLMGenerator(config)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.ndim in (1, 2) and x.dtype == torch.long:
        return (x.unsqueeze(0), True) if x.ndim == 1 else (x, False)
    if x.ndim in (2, 3) and x.is_floating_point():
        return (x.unsqueeze(0), True) if x.ndim == 2 else (x, False)
    raise ModelError(f"unsupported input: ndim={x.ndim}, dtype={x.dtype}")


def teacher_logits(teacher: TransformerClassifier, ids: torch.Tensor) -> torch.Tensor:
    """Teacher logits on hard token ids; detached, never part of a graph."""
    if not (ids.dtype == torch.long and ids.ndim in (1, 2)):
        raise ModelError("teacher accepts hard token ids only")
    batch, squeeze = _as_batch(ids)
    was_training = teacher.training
    teacher.eval()
    with torch.no_grad():
        out = teacher(batch)
    if was_training:
        teacher.train()
    return out.squeeze(0) if squeeze else out


def student_logits(student: TransformerClassifier, x: torch.Tensor,
                   padding_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Student logits on hard ids or relaxed rows; fully differentiable."""
    batch, squeeze = _as_batch(x)
    out = student(batch, padding_mask)
    return out.squeeze(0) if squeeze else out


def generator_logits(generator: MaskedLMGenerator, ids: torch.Tensor) -> torch.Tensor:
    """Per-position vocabulary logits for a (masked) id sequence."""
    batch, squeeze = _as_batch(ids)
    out = generator(batch)
    return out.squeeze(0) if squeeze else out


def param_hash(model: nn.Module) -> str:
    """sha256 over all parameters and buffers, in name order."""
    h = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


_MODEL_KINDS = {"classifier": TransformerClassifier, "mlm": MaskedLMGenerator}


def save_checkpoint(model: nn.Module, path, vocab: Vocabulary,
                    step: int = 0, dev_metric: float | None = None) -> Path:
    """Write the parameter blob plus a JSON sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = "classifier" if isinstance(model, TransformerClassifier) else "mlm"
    torch.save(model.state_dict(), path)
    sidecar = {
        "kind": kind,
        "config": model.config.to_dict(),
        "vocab_hash": vocab.content_hash(),
        "step": step,
        "dev_metric": dev_metric,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path, vocab: Vocabulary) -> nn.Module:
    """Rebuild a model from its blob + sidecar, verifying the vocabulary."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise ModelError(f"missing checkpoint sidecar: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    if sidecar["vocab_hash"] != vocab.content_hash():
        raise ModelError("vocabulary hash mismatch: checkpoint was trained on a different vocabulary")
    config = EncoderConfig.from_dict(sidecar["config"])
    if config.vocab_size != len(vocab):
        raise ModelError(f"checkpoint vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    model = _MODEL_KINDS[sidecar["kind"]](config)
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model


def checkpoint_sidecar(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
