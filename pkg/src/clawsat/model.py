"""Neural code model and checkpointing.

Architecture: token embedding -> 2-layer bidirectional GRU encoder ->
mean pooling -> tanh projection (the representation ``z``), plus a 2-layer
unidirectional GRU decoder conditioned on ``z`` through its initial hidden
state, with an output vocabulary projection. Everything runs in float64 so
finite-difference gradient probes stay tight and checkpoints round-trip
exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .corpus import Vocabulary
from .errors import IdOutOfRange, NonFiniteLoss, ShapeMismatch, VocabMismatch
from .seeding import rng_for

PAD, UNK, BOS, EOS = Vocabulary.PAD, Vocabulary.UNK, Vocabulary.BOS, Vocabulary.EOS

# Tensors in these groups form the representation network; the rest is the
# task head trained (or retrained) during fine-tuning.
ENCODER_PREFIXES = ("embedding.", "encoder.", "proj.")

_MAGIC = b"CLAWSATCKPT1\n"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_embed: int = 64
    d_hidden: int = 128
    d_proj: int = 64
    d_dec: int = 128
    pooling: str = "mean"  # "mean" or "final"


def is_encoder_tensor(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


class CodeModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.pooling not in ("mean", "final"):
            raise ValueError(f"unknown pooling {config.pooling!r}")
        self.config = config
        v, d = config.vocab_size, config.d_embed
        self.embedding = nn.Embedding(v, d)
        self.encoder = nn.GRU(
            d, config.d_hidden, num_layers=2, bidirectional=True, batch_first=True
        )
        self.proj = nn.Linear(2 * config.d_hidden, config.d_proj)
        self.dec_embedding = nn.Embedding(v, d)
        self.dec_init = nn.Linear(config.d_proj, 2 * config.d_dec)
        # z is re-fed at every decoder step; h0 alone fades over long targets
        self.decoder = nn.GRU(d + config.d_proj, config.d_dec, num_layers=2, batch_first=True)
        self.out = nn.Linear(config.d_dec, v)
        self.to(torch.float64)

    # -- input plumbing ----------------------------------------------------

    def pad_ids(self, ids_batch: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        v = self.config.vocab_size
        lengths = []
        for ids in ids_batch:
            if len(ids) == 0:
                raise ValueError("empty token sequence")
            for i in ids:
                if not 0 <= i < v:
                    raise IdOutOfRange(f"token id {i} outside vocabulary of size {v}")
            lengths.append(len(ids))
        max_len = max(lengths)
        padded = torch.full((len(ids_batch), max_len), PAD, dtype=torch.long)
        for row, ids in enumerate(ids_batch):
            padded[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        return padded, torch.tensor(lengths, dtype=torch.long)

    def embed_ids(self, ids_batch: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
        padded, lengths = self.pad_ids(ids_batch)
        return self.embedding(padded), lengths

    # -- representation ----------------------------------------------------

    def encode_batch(
        self,
        ids_batch: Sequence[Sequence[int]] | None = None,
        inputs_embeds: torch.Tensor | None = None,
        lengths: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Representations z, one row per sequence."""
        if inputs_embeds is None:
            inputs_embeds, lengths = self.embed_ids(ids_batch)
        elif lengths is None:
            raise ValueError("inputs_embeds requires explicit lengths")
        packed = nn.utils.rnn.pack_padded_sequence(
            inputs_embeds, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        states, h_n = self.encoder(packed)
        if self.config.pooling == "mean":
            unpacked, _ = nn.utils.rnn.pad_packed_sequence(states, batch_first=True)
            mask = (
                torch.arange(unpacked.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
            ).to(unpacked.dtype)
            pooled = (unpacked * mask.unsqueeze(-1)).sum(dim=1) / lengths.to(
                unpacked.dtype
            ).unsqueeze(1)
        else:
            pooled = torch.cat([h_n[-2], h_n[-1]], dim=1)
        return torch.tanh(self.proj(pooled))

    def encode(self, ids: Sequence[int]) -> torch.Tensor:
        return self.encode_batch([list(ids)])[0]

    # -- task head ----------------------------------------------------------

    def _decoder_start(self, z: torch.Tensor) -> torch.Tensor:
        b = z.shape[0]
        return (
            self.dec_init(z)
            .reshape(b, 2, self.config.d_dec)
            .permute(1, 0, 2)
            .contiguous()
        )

    def _decoder_inputs(self, z: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        emb = self.dec_embedding(token_ids)
        context = z.unsqueeze(1).expand(-1, emb.shape[1], -1)
        return torch.cat([emb, context], dim=2)

    def decode_logits(self, z: torch.Tensor, target_ids: Sequence[Sequence[int]]):
        """Teacher-forced logits plus the label/mask tensors.

        Inputs are BOS-prefixed targets, labels are EOS-suffixed targets.
        """
        if any(len(t) == 0 for t in target_ids):
            raise ValueError("empty target sequence")
        lengths = [len(t) + 1 for t in target_ids]
        max_len = max(lengths)
        inputs = torch.full((len(target_ids), max_len), PAD, dtype=torch.long)
        labels = torch.full((len(target_ids), max_len), PAD, dtype=torch.long)
        for row, target in enumerate(target_ids):
            for i in target:
                if not 0 <= i < self.config.vocab_size:
                    raise IdOutOfRange(f"target id {i} outside vocabulary")
            inputs[row, 0] = BOS
            inputs[row, 1 : len(target) + 1] = torch.tensor(target, dtype=torch.long)
            labels[row, : len(target)] = torch.tensor(target, dtype=torch.long)
            labels[row, len(target)] = EOS
        states, _ = self.decoder(self._decoder_inputs(z, inputs), self._decoder_start(z))
        logits = self.out(states)
        mask = (
            torch.arange(max_len).unsqueeze(0)
            < torch.tensor(lengths, dtype=torch.long).unsqueeze(1)
        ).to(logits.dtype)
        return logits, labels, mask

    def decode_losses_from_z(
        self, z: torch.Tensor, target_ids: Sequence[Sequence[int]]
    ) -> torch.Tensor:
        """Mean per-target-token cross-entropy per sequence, given z."""
        logits, labels, mask = self.decode_logits(z, target_ids)
        logp = torch.log_softmax(logits, dim=-1)
        nll = -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
        return (nll * mask).sum(dim=1) / mask.sum(dim=1)

    def sequence_losses(
        self,
        ids_batch: Sequence[Sequence[int]] | None,
        target_ids: Sequence[Sequence[int]],
        inputs_embeds: torch.Tensor | None = None,
        lengths: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Mean per-target-token cross-entropy for each sequence in a batch."""
        z = self.encode_batch(ids_batch, inputs_embeds=inputs_embeds, lengths=lengths)
        return self.decode_losses_from_z(z, target_ids)

    def task_loss(self, ids: Sequence[int], target: Sequence[int]) -> torch.Tensor:
        return self.sequence_losses([list(ids)], [list(target)])[0]

    # -- prediction ----------------------------------------------------------

    @torch.no_grad()
    def greedy_decode(self, z: torch.Tensor, max_len: int) -> list[list[int]]:
        """Greedy decoding; argmax ties resolve to the lowest token id."""
        b = z.shape[0]
        hidden = self._decoder_start(z)
        step_input = torch.full((b, 1), BOS, dtype=torch.long)
        outputs: list[list[int]] = [[] for _ in range(b)]
        done = [False] * b
        for _ in range(max_len):
            states, hidden = self.decoder(self._decoder_inputs(z, step_input), hidden)
            next_ids = self.out(states[:, -1]).argmax(dim=-1)
            for row in range(b):
                if not done[row]:
                    token = int(next_ids[row])
                    if token == EOS:
                        done[row] = True
                    else:
                        outputs[row].append(token)
            if all(done):
                break
            step_input = next_ids.unsqueeze(1)
        return outputs

    def predict_summary(self, ids: Sequence[int], max_len: int = 16) -> list[int]:
        return self.greedy_decode(self.encode(ids).unsqueeze(0), max_len)[0]

    def predict_completion(self, ids: Sequence[int], length: int = 6) -> list[int]:
        """Exactly `length` next tokens, EOS-padded when decoding stops early."""
        out = self.greedy_decode(self.encode(ids).unsqueeze(0), length)[0]
        return (out + [EOS] * length)[:length]

    # -- parameter views -----------------------------------------------------

    def encoder_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if is_encoder_tensor(n)]

    def head_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not is_encoder_tensor(n)]


def set_encoder_frozen(model: CodeModel, frozen: bool) -> None:
    for _, param in model.encoder_parameters():
        param.requires_grad_(not frozen)


# Uniform init half-widths. Small flat inits (e.g. +-0.08) make the 2-layer
# GRU contract all inputs to one point: representations collapse, and
# training then fits the unconditional target distribution and stalls. The
# encoder needs gain ~2 relative to fan so program identity survives
# pooling; everything else uses the standard fan-scaled width.
_EMBED_HALF_WIDTH = 0.5
_ENCODER_GAIN = 2.0


def _init_half_width(name: str, param: torch.Tensor) -> float:
    if name.startswith(("embedding.", "dec_embedding.")):
        return _EMBED_HALF_WIDTH
    fan = param.shape[-1] if param.ndim >= 2 else max(1, param.shape[0])
    gain = _ENCODER_GAIN if name.startswith("encoder.") else 1.0
    return gain * (3.0 / fan) ** 0.5


def init_model(config: ModelConfig, seed) -> CodeModel:
    """Seeded fan-scaled uniform initialization, reproducible bit-for-bit."""
    model = CodeModel(config)
    rng = rng_for(seed, "init")
    with torch.no_grad():
        for name, param in sorted(model.named_parameters()):
            r = _init_half_width(name, param)
            values = rng.uniform(-r, r, size=tuple(param.shape))
            param.copy_(torch.from_numpy(values))
    return model


def grad_params(model: CodeModel, loss_fn: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Analytic gradients for every named tensor; zeros where frozen/unused."""
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss evaluated to {loss.item()!r}")
    named = list(model.named_parameters())
    trainable = [p for _, p in named if p.requires_grad]
    grads = torch.autograd.grad(loss, trainable, allow_unused=True) if trainable else ()
    by_id = {id(p): g for p, g in zip(trainable, grads)}
    out = {}
    for name, param in named:
        grad = by_id.get(id(param))
        out[name] = torch.zeros_like(param) if grad is None else grad
    return out


def grad_inputs(
    model: CodeModel,
    ids: Sequence[int],
    objective: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """d(objective)/d(embedding vector) at every input position.

    `objective(inputs_embeds, lengths)` must evaluate the scalar being
    maximized or minimized from embedded inputs.
    """
    embeds, lengths = model.embed_ids([list(ids)])
    embeds = embeds.detach().requires_grad_(True)
    value = objective(embeds, lengths)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"objective evaluated to {value.item()!r}")
    (grad,) = torch.autograd.grad(value, embeds)
    return grad[0]


# ---------------------------------------------------------------------------
# Checkpoints: canonical byte format (JSON header + sorted raw tensors).
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    vocab_hash: str
    train_config: dict = field(default_factory=dict)
    epoch: int = 0

    @classmethod
    def from_model(
        cls, model: CodeModel, vocab_hash: str, train_config: dict | None = None, epoch: int = 0
    ) -> "Checkpoint":
        tensors = {
            name: param.detach().numpy().astype("<f8", copy=True)
            for name, param in model.named_parameters()
        }
        return cls(model.config, tensors, vocab_hash, dict(train_config or {}), epoch)

    def build_model(self, vocab: Vocabulary | None = None) -> CodeModel:
        if vocab is not None:
            if vocab.content_hash() != self.vocab_hash:
                raise VocabMismatch(
                    "checkpoint was trained against a different vocabulary"
                )
            if len(vocab) != self.config.vocab_size:
                raise VocabMismatch("vocabulary size differs from checkpoint config")
        model = CodeModel(self.config)
        with torch.no_grad():
            for name, param in model.named_parameters():
                stored = self.tensors.get(name)
                if stored is None or tuple(stored.shape) != tuple(param.shape):
                    raise ShapeMismatch(f"tensor {name!r} missing or mis-shaped")
                param.copy_(torch.from_numpy(stored))
        return model

    def to_bytes(self) -> bytes:
        names = sorted(self.tensors)
        header = {
            "config": asdict(self.config),
            "epoch": self.epoch,
            "tensors": [[n, list(self.tensors[n].shape)] for n in names],
            "train_config": self.train_config,
            "vocab_hash": self.vocab_hash,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
        chunks = [_MAGIC, blob]
        for name in names:
            chunks.append(self.tensors[name].astype("<f8", copy=False).tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(_MAGIC):
            raise ShapeMismatch("not a checkpoint byte stream")
        body = data[len(_MAGIC) :]
        header_end = body.index(b"\n")
        header = json.loads(body[:header_end])
        cursor = header_end + 1
        tensors: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = body[cursor : cursor + count * 8]
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            cursor += count * 8
        return cls(
            config=ModelConfig(**header["config"]),
            tensors=tensors,
            vocab_hash=header["vocab_hash"],
            train_config=header["train_config"],
            epoch=header["epoch"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary | None = None) -> "Checkpoint":
        ckpt = cls.from_bytes(Path(path).read_bytes())
        if vocab is not None and vocab.content_hash() != ckpt.vocab_hash:
            raise VocabMismatch("checkpoint was trained against a different vocabulary")
        return ckpt
