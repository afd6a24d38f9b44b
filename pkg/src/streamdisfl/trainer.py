"""Restart-incremental training.

Every utterance contributes all of its prefixes to each step: the proper
prefixes feed the prefix loss and latency cost, the full utterance feeds the
full-sequence loss. All prefixes of a batch are evaluated in a single padded
forward pass.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Utterance, Vocabulary
from .decoder import decode_corpus
from .encoder import EncoderConfig, StreamingTagger
from .metrics import streaming_prf
from .objective import LossBreakdown, LossConfig, batch_loss_terms

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    epochs: int = 8
    batch_size: int = 8
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    loss: LossConfig = field(default_factory=LossConfig)
    shuffle_seed: int = 0
    dropout_seed: int = 0
    max_prefix_len: int = 62
    # leading epochs trained on the full-sequence loss alone, so the wait head
    # starts learning against a disfluency head that already fits the data;
    # model selection only considers the epochs after the warm-up
    warmup_epochs: int = 0
    # latency schedule after the warm-up: train at ``lambda_start`` first, then
    # move linearly to the loss's lambda_ over the last ``lambda_ramp_epochs``
    # epochs (the first ramp epoch still uses lambda_start); None keeps lambda_
    # fixed. Going straight to a large latency weight tends to saturate the
    # wait head at "never wait"
    lambda_start: float | None = None
    lambda_ramp_epochs: int = 0
    # decoder used for dev-set model selection; "auto" picks "dynamic" when the
    # loss trains the wait head and "la:0" otherwise
    selection_decoder: str = "auto"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.max_prefix_len < 1:
            raise ValueError("epochs, batch_size and max_prefix_len must be at least 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must lie in [0, epochs ({self.epochs}))")
        if self.lambda_ramp_epochs < 0 or self.warmup_epochs + self.lambda_ramp_epochs > self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) and lambda_ramp_epochs "
                             f"({self.lambda_ramp_epochs}) must be non-negative and fit in "
                             f"epochs ({self.epochs})")
        if self.lambda_start is not None and not (self.lambda_start >= 0 and self.lambda_ramp_epochs >= 1):
            raise ValueError("lambda_start must be non-negative and needs lambda_ramp_epochs >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @property
    def resolved_selection_decoder(self) -> str:
        if self.selection_decoder != "auto":
            return self.selection_decoder
        return "dynamic" if self.loss.uses_wait_head else "la:0"

    def in_warmup(self, epoch: int) -> bool:
        """True for warm-up epochs of a loss that has prefix or latency terms."""
        return epoch <= self.warmup_epochs and (self.loss.gamma > 0 or self.loss.lambda_ > 0)

    def epoch_loss(self, epoch: int) -> LossConfig:
        """Loss weights in effect for a 1-based epoch."""
        if self.in_warmup(epoch):
            return dataclasses.replace(self.loss, gamma=0.0, lambda_=0.0)
        # no ramp towards a zero latency weight (full-sequence or prefix-only runs)
        if self.lambda_start is None or self.loss.lambda_ == 0:
            return self.loss
        ramp_pos = epoch - (self.epochs - self.lambda_ramp_epochs) - 1
        if ramp_pos < 0:
            lam = self.lambda_start
        elif self.lambda_ramp_epochs == 1:
            lam = self.loss.lambda_
        else:
            frac = ramp_pos / (self.lambda_ramp_epochs - 1)
            lam = self.lambda_start + (self.loss.lambda_ - self.lambda_start) * frac
        return dataclasses.replace(self.loss, lambda_=lam)


PRESETS: dict[str, dict] = {
    # settings for fine-tuning a large pretrained encoder
    "paper": {"lambda_": 1.5e-7, "learning_rate": 1.2e-4, "gamma": 1.9, "batch_size": 8, "epochs": 12},
    # from-scratch desk-scale model on the synthetic corpus
    "desk": {"lambda_": 1.5, "learning_rate": 1e-3, "gamma": 1.9, "batch_size": 8, "epochs": 30,
             "warmup_epochs": 10, "lambda_start": 1.0, "lambda_ramp_epochs": 15},
}


def make_train_config(preset: str = "desk", **overrides) -> TrainConfig:
    """Build a TrainConfig from a preset; loss fields may be given flat."""
    values = dict(PRESETS[preset])
    values.update(overrides)
    loss_keys = {f.name for f in dataclasses.fields(LossConfig)}
    loss = LossConfig(**{k: values.pop(k) for k in list(values) if k in loss_keys})
    return TrainConfig(loss=loss, **values)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _coerce(text: str, like):
    if like is None:  # optional float fields
        return None if text.lower() == "none" else float(text)
    if isinstance(like, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def read_config_file(path) -> tuple[dict, dict, dict]:
    """Parse flat ``key = value`` lines into (encoder, train, loss) override dicts.

    Keys are the field names of EncoderConfig, TrainConfig and LossConfig;
    ``seed`` belongs to the encoder. Blank lines and ``#`` comments are ignored.
    """
    groups = {
        "encoder": {f.name: f.default for f in dataclasses.fields(EncoderConfig)},
        "train": {f.name: f.default for f in dataclasses.fields(TrainConfig) if f.name != "loss"},
        "loss": {f.name: f.default for f in dataclasses.fields(LossConfig)},
    }
    out = {"encoder": {}, "train": {}, "loss": {}}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        for group, defaults in groups.items():
            if key in defaults:
                try:
                    out[group][key] = _coerce(value, defaults[key])
                except ValueError as exc:
                    raise ValueError(f"{path}:{n}: {key}: {exc}") from None
                break
        else:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
    return out["encoder"], out["train"], out["loss"]


def write_config_file(path, encoder: EncoderConfig, train: TrainConfig) -> None:
    lines = ["# encoder"]
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(encoder).items()]
    lines.append("# training")
    lines += [f"{f.name} = {getattr(train, f.name)}" for f in dataclasses.fields(train) if f.name != "loss"]
    lines.append("# loss")
    lines += [f"{k} = {v}" for k, v in dataclasses.asdict(train.loss).items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def enumerate_prefixes(token_ids: Sequence) -> list[list]:
    """The strongly incremental prefixes x_1, ..., x_n of an input."""
    if len(token_ids) == 0:
        raise ValueError("empty input")
    return [list(token_ids[:i]) for i in range(1, len(token_ids) + 1)]


@dataclass
class PrefixBatch:
    ids: torch.Tensor
    prefix_lengths: torch.Tensor
    utterance_index: torch.Tensor
    utterance_lengths: torch.Tensor
    labels: torch.Tensor

    @property
    def n_forward(self) -> int:
        return self.ids.shape[0]


def build_prefix_batch(examples: Sequence[tuple[Sequence[int], Sequence[int]]],
                       start_marker: bool = False) -> PrefixBatch:
    """Stack every prefix of every (token_ids, labels) example into one padded batch."""
    offset = 1 if start_marker else 0
    width = max(len(ids) for ids, _ in examples) + offset
    rows = sum(len(ids) for ids, _ in examples)
    ids_t = torch.zeros((rows, width), dtype=torch.long)
    lab_t = torch.zeros((rows, width - offset), dtype=torch.long)
    plen = torch.zeros(rows, dtype=torch.long)
    uidx = torch.zeros(rows, dtype=torch.long)
    r = 0
    for u, (ids, labels) in enumerate(examples):
        full = torch.tensor(([2] if start_marker else []) + list(ids))
        lab = torch.tensor(list(labels))
        for i in range(1, len(ids) + 1):
            ids_t[r, : i + offset] = full[: i + offset]
            lab_t[r, :i] = lab[:i]
            plen[r] = i
            uidx[r] = u
            r += 1
    ulen = torch.tensor([len(ids) for ids, _ in examples])
    return PrefixBatch(ids_t, plen, uidx, ulen, lab_t)


def batch_losses(model: StreamingTagger, batch: PrefixBatch, config: LossConfig,
                 gen: torch.Generator | None = None):
    offset = 1 if model.config.start_marker else 0
    dis, wait = model(batch.ids, batch.prefix_lengths + offset, gen)
    return batch_loss_terms(dis[:, offset:], wait[:, offset:], batch.prefix_lengths,
                            batch.utterance_index, batch.utterance_lengths, batch.labels, config)


def encode_corpus(corpus: Sequence[Utterance], vocab: Vocabulary, cap: int):
    """Encode utterances, truncating to ``cap`` tokens; returns (examples, n_truncated)."""
    examples = []
    truncated = 0
    for utt in corpus:
        ids = vocab.encode(utt.tokens)
        labels = list(utt.labels)
        if len(ids) > cap:
            truncated += 1
            ids, labels = ids[:cap], labels[:cap]
        examples.append((ids, labels))
    return examples, truncated


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    dev: LossBreakdown
    dev_streaming_f1: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_streaming_f1: float = float("nan")
    truncated_utterances: int = 0
    forward_passes: int = 0
    checkpoint: str | None = None


class TrainingDiverged(FloatingPointError):
    pass


def _mean_breakdown(parts: list[tuple[float, float, float, float]]) -> LossBreakdown:
    arr = np.array(parts, dtype=float)
    if len(arr) == 0:
        return LossBreakdown(float("nan"), float("nan"), float("nan"), float("nan"))
    m = arr.mean(axis=0)
    return LossBreakdown(float(m[0]), float(m[1]), float(m[2]), float(m[3]))


def evaluate_dev_loss(model: StreamingTagger, corpus: Sequence[Utterance], vocab: Vocabulary,
                      loss_config: LossConfig, batch_size: int = 32) -> LossBreakdown:
    """Mean per-utterance loss terms without dropout or parameter updates."""
    examples, _ = encode_corpus(corpus, vocab, model.config.max_tokens)
    was_training = model.training
    model.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = build_prefix_batch(examples[start:start + batch_size], model.config.start_marker)
            full, pre, lat, tot = batch_losses(model, batch, loss_config)
            parts.extend(zip(full.tolist(), pre.tolist(), lat.tolist(), tot.tolist()))
    model.train(was_training)
    return _mean_breakdown(parts)


def dev_streaming_f1(model, corpus, vocab, decoder: str, threshold: float) -> float:
    logs = decode_corpus(model, corpus, vocab, decoder, threshold)
    return streaming_prf(logs).f1


def _make_optimizer(model, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                                betas=(config.beta1, config.beta2), eps=config.eps)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum)


def train(train_corpus: Sequence[Utterance], dev_corpus: Sequence[Utterance],
          encoder_config: EncoderConfig, train_config: TrainConfig,
          vocab: Vocabulary | None = None, log_path=None,
          step_callback=None) -> tuple[StreamingTagger, TrainReport]:
    """Train from scratch and return the epoch with the best dev streaming F1.

    ``step_callback(step, batch, breakdown)`` is called after every update
    with the batch-mean loss terms (used by tests).
    """
    if not train_corpus or not dev_corpus:
        raise ValueError("train and dev corpora must be non-empty")
    torch.use_deterministic_algorithms(True)
    vocab = vocab or Vocabulary.build(train_corpus)
    if len(vocab) > encoder_config.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} words exceeds vocab_size {encoder_config.vocab_size}")
    cap = min(train_config.max_prefix_len, encoder_config.max_tokens)
    examples, truncated = encode_corpus(train_corpus, vocab, cap)
    if truncated:
        log.warning("truncated %d training utterances to %d tokens", truncated, cap)

    model = StreamingTagger(encoder_config)
    optimizer = _make_optimizer(model, train_config)
    shuffle = np.random.default_rng(train_config.shuffle_seed)
    dropout_gen = torch.Generator().manual_seed(train_config.dropout_seed)
    decoder = train_config.resolved_selection_decoder
    threshold = train_config.loss.wait_threshold

    report = TrainReport(truncated_utterances=truncated)
    best_state = None
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "full", "prefix", "latency", "total", "dev_streaming_f1"])
    step = 0
    try:
        for epoch in range(1, train_config.epochs + 1):
            start = time.perf_counter()
            model.train()
            order = shuffle.permutation(len(examples))
            parts = []
            loss_config = train_config.epoch_loss(epoch)
            for b in range(0, len(order), train_config.batch_size):
                chunk = [examples[int(i)] for i in order[b:b + train_config.batch_size]]
                batch = build_prefix_batch(chunk, encoder_config.start_marker)
                full, pre, lat, tot = batch_losses(model, batch, loss_config, dropout_gen)
                loss = tot.mean()
                if not torch.isfinite(loss):
                    ids = [train_corpus[int(i)].id for i in order[b:b + train_config.batch_size]]
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}, batch {ids}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                report.forward_passes += batch.n_forward
                parts.extend(zip(full.tolist(), pre.tolist(), lat.tolist(), tot.tolist()))
                step += 1
                if step_callback is not None:
                    step_callback(step, batch, LossBreakdown(full.mean(), pre.mean(), lat.mean(), loss))
            train_mean = _mean_breakdown(parts)
            dev_loss = evaluate_dev_loss(model, dev_corpus, vocab, train_config.loss)
            f1 = dev_streaming_f1(model, dev_corpus, vocab, decoder, threshold)
            seconds = time.perf_counter() - start
            report.epochs.append(EpochRecord(epoch, train_mean, dev_loss, f1, seconds))
            log.info("epoch %d: train total %.4f dev total %.4f dev streaming F1 %.4f (%.1fs)",
                     epoch, train_mean.total, dev_loss.total, f1, seconds)
            if writer is not None:
                writer.writerow([epoch, repr(train_mean.full), repr(train_mean.prefix),
                                 repr(train_mean.latency), repr(train_mean.total), repr(f1)])
                fh.flush()
            if train_config.in_warmup(epoch):
                continue
            if best_state is None or f1 > report.best_dev_streaming_f1:
                report.best_epoch = epoch
                report.best_dev_streaming_f1 = f1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if fh is not None:
            fh.close()
    model.load_state_dict(best_state)
    model.eval()
    return model, report
