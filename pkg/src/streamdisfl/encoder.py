"""Small bidirectional transformer encoder with a disfluency head and a wait head.

Every prefix of an utterance is an independent input (restart incrementality).
For speed, many prefixes are run in one padded batch; padded key positions
are masked out of attention, so row ``i`` of a batch depends only on its own
first ``lengths[i]`` tokens.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 256
    max_len: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    dropout_rate: float = 0.0
    seed: int = 0
    start_marker: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.max_len, self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ValueError("encoder sizes must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def max_tokens(self) -> int:
        """Longest utterance accepted (two positions stay reserved for boundary markers)."""
        return self.max_len - 2


@dataclass
class PrefixOutputs:
    """Logits of both heads for one input prefix, one row per token."""

    disfluency_logits: torch.Tensor
    wait_logits: torch.Tensor

    def __post_init__(self):
        if self.disfluency_logits.shape != self.wait_logits.shape:
            raise ValueError("head outputs must have matching shapes")
        if self.disfluency_logits.ndim != 2 or self.disfluency_logits.shape[1] != 2:
            raise ValueError("head outputs must be (length, 2)")

    def __len__(self) -> int:
        return self.disfluency_logits.shape[0]


def _uniform_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=gen, dtype=tensor.dtype) * 2 * bound - bound)


def _dropout(x: torch.Tensor, rate: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or rate == 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


class EncoderLayer(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.d_model
        self.n_heads = config.n_heads
        self.qkv = nn.Linear(d, 3 * d, dtype=DTYPE)
        self.attn_out = nn.Linear(d, d, dtype=DTYPE)
        self.attn_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.ff_in = nn.Linear(d, config.d_ff, dtype=DTYPE)
        self.ff_out = nn.Linear(config.d_ff, d, dtype=DTYPE)
        self.ff_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.rate = config.dropout_rate

    def forward(self, h, key_mask, gen=None):
        b, n, d = h.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(self.attn_norm(h)).split(d, dim=-1)
        q = q.view(b, n, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, n, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, n, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = _dropout(torch.softmax(scores, dim=-1), self.rate, gen)
        ctx = (attn @ v).transpose(1, 2).reshape(b, n, d)
        h = h + _dropout(self.attn_out(ctx), self.rate, gen)
        ff = self.ff_out(F.gelu(self.ff_in(self.ff_norm(h))))
        return h + _dropout(ff, self.rate, gen)


class StreamingTagger(nn.Module):
    """Encoder plus two linear token-classification heads (disfluency, wait)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d, dtype=DTYPE)
        self.position_embedding = nn.Embedding(config.max_len, d, dtype=DTYPE)
        self.final_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.disfluency_head = nn.Linear(d, 2, dtype=DTYPE)
        self.wait_head = nn.Linear(d, 2, dtype=DTYPE)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.config.seed)
        d = self.config.d_model
        for name, p in self.named_parameters():
            if "norm" in name:
                continue
            if name.endswith("embedding.weight"):
                _uniform_(p, d, gen)
            else:
                owner = self.get_submodule(name.rsplit(".", 1)[0])
                _uniform_(p, owner.in_features, gen)
        with torch.no_grad():
            # neutral start: wait probability 0.5 until the body learns features
            self.wait_head.bias.zero_()

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor, gen: torch.Generator | None = None):
        """Batched evaluation.

        ``ids`` is (batch, width) with each row holding one input in its first
        ``lengths[row]`` positions. Returns (disfluency_logits, wait_logits),
        each (batch, width, 2); rows past ``lengths`` are meaningless.
        """
        width = ids.shape[1]
        key_mask = torch.arange(width)[None, :] < lengths[:, None]
        positions = torch.arange(width)
        h = self.token_embedding(ids) + self.position_embedding(positions)[None]
        h = _dropout(h, self.config.dropout_rate, gen)
        for layer in self.layers:
            h = layer(h, key_mask, gen)
        h = self.final_norm(h)
        return self.disfluency_head(h), self.wait_head(h)

    def prepare(self, token_ids: Sequence[int]) -> list[int]:
        """Validate one input and add the start marker when configured."""
        ids = [int(t) for t in token_ids]
        if not ids:
            raise ValueError("empty input")
        if len(ids) > self.config.max_tokens:
            raise ValueError(f"input of length {len(ids)} exceeds limit {self.config.max_tokens}")
        if min(ids) < 0 or max(ids) >= self.config.vocab_size:
            raise ValueError("token id outside the vocabulary")
        return ([2] if self.config.start_marker else []) + ids

    def run_inputs(self, inputs: Sequence[Sequence[int]], gen: torch.Generator | None = None):
        """Evaluate independent inputs in one padded batch.

        Returns (disfluency_logits, wait_logits, lengths) with logits of shape
        (len(inputs), width, 2) aligned to the caller's tokens (the start
        marker, if any, is stripped).
        """
        prepared = [self.prepare(x) for x in inputs]
        lengths = torch.tensor([len(x) for x in prepared])
        width = int(lengths.max())
        ids = torch.zeros((len(prepared), width), dtype=torch.long)
        for row, x in enumerate(prepared):
            ids[row, : len(x)] = torch.tensor(x)
        dis, wait = self(ids, lengths, gen)
        offset = 1 if self.config.start_marker else 0
        return dis[:, offset:], wait[:, offset:], lengths - offset


def forward(model: StreamingTagger, token_ids: Sequence[int], train_mode: bool = False,
            seed: int = 0) -> PrefixOutputs:
    """Evaluate a single input prefix; dropout is active only with ``train_mode``."""
    gen = torch.Generator().manual_seed(seed) if train_mode else None
    model.train(train_mode)
    dis, wait, _ = model.run_inputs([token_ids], gen)
    return PrefixOutputs(dis[0], wait[0])


def wait_probability(outputs: PrefixOutputs | torch.Tensor) -> torch.Tensor:
    """Softmax probability of the wait class for every token."""
    logits = outputs.wait_logits if isinstance(outputs, PrefixOutputs) else torch.as_tensor(outputs, dtype=DTYPE)
    return torch.softmax(logits, dim=-1)[..., 1]


def gradient(model: StreamingTagger, loss_fn: Callable[[StreamingTagger], torch.Tensor]) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss of the model's outputs w.r.t. every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    grads = {}
    if loss.requires_grad:
        loss.backward()
    for name, p in model.named_parameters():
        grads[name] = np.zeros(p.shape) if p.grad is None else p.grad.detach().numpy().copy()
    model.zero_grad(set_to_none=True)
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"STRDISFL-CKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: StreamingTagger, path, metadata: dict | None = None) -> None:
    """Write config, optional JSON metadata and every tensor as raw little-endian bytes."""
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().numpy(), dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"config": asdict(model.config), "metadata": metadata or {}, "tensors": tensors},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[StreamingTagger, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, header_len = struct.unpack_from("<HQ", data, pos)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<HQ")
    header = json.loads(data[pos:pos + header_len].decode("utf-8"))
    body = memoryview(data)[pos + header_len:]
    known = {f.name for f in fields(EncoderConfig)}
    config = EncoderConfig(**{k: v for k, v in header["config"].items() if k in known})
    model = StreamingTagger(config)
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(body[t["offset"]:t["offset"] + t["nbytes"]], dtype="<f8").reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.eval()
    return model, header["metadata"]
