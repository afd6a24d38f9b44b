"""Streaming decoders, prediction logs and incremental display rendering.

A prediction log stores, for every prefix i of an utterance, the decision on
each of its first i tokens: ``F`` (fluent), ``D`` (disfluent) or ``.``
(abstain). Log file records look like::

    utt00007	3
    F
    F.
    FDF
    010

i.e. id and length, one row per prefix, then the gold labels. Records are
separated by a blank line.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .encoder import StreamingTagger

logger = logging.getLogger(__name__)

FLUENT, DISFLUENT, ABSTAIN = "F", "D", "."
DIS_MARK, WAIT_MARK = "<DIS>", "<WAIT>"


@dataclass(frozen=True)
class PredictionLog:
    utterance_id: str
    rows: tuple[str, ...]
    gold: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))
        if self.gold is not None:
            object.__setattr__(self, "gold", tuple(int(g) for g in self.gold))
        for i, row in enumerate(self.rows, start=1):
            if len(row) != i or set(row) - {FLUENT, DISFLUENT, ABSTAIN}:
                raise ValueError(f"{self.utterance_id}: malformed row {i}: {row!r}")
        if self.gold is not None and len(self.gold) != len(self.rows):
            raise ValueError(f"{self.utterance_id}: gold length differs from row count")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final(self) -> str:
        return self.rows[-1]

    def reabstentions(self) -> int:
        """Number of (i, j) where token j was decided at prefix i-1 but abstained at i."""
        return sum(
            1
            for prev, row in zip(self.rows, self.rows[1:])
            for a, b in zip(prev, row)
            if a != ABSTAIN and b == ABSTAIN
        )


def row_decisions(disfluency_logits: torch.Tensor, wait_probs, threshold: float = 0.5,
                  force: bool = False) -> str:
    """Decisions for one prefix: label every token before the first wait, abstain after.

    Ties in the disfluency head resolve to fluent. ``force`` ignores the wait
    head (used at the end of the utterance).
    """
    labels = [DISFLUENT if float(d) > float(f) else FLUENT for f, d in disfluency_logits.tolist()]
    if force:
        return "".join(labels)
    probs = wait_probs.tolist() if torch.is_tensor(wait_probs) else list(wait_probs)
    cut = next((j for j, p in enumerate(probs) if p > threshold), len(labels))
    return "".join(labels[:cut]) + ABSTAIN * (len(labels) - cut)


def _prefix_outputs(model: StreamingTagger, token_ids: Sequence[int]):
    model.eval()
    with torch.no_grad():
        prefixes = [token_ids[:i] for i in range(1, len(token_ids) + 1)]
        dis, wait, _ = model.run_inputs(prefixes)
    return dis, torch.softmax(wait, dim=-1)[..., 1]


def stream_decode(model: StreamingTagger, token_ids: Sequence[int], threshold: float = 0.5,
                  utterance_id: str = "", gold=None) -> PredictionLog:
    """Dynamic-lookahead decoding, re-evaluating every prefix from scratch."""
    n = len(token_ids)
    dis, p_wait = _prefix_outputs(model, token_ids)
    rows = [row_decisions(dis[i - 1, :i], p_wait[i - 1, :i], threshold, force=(i == n))
            for i in range(1, n + 1)]
    return PredictionLog(utterance_id, tuple(rows), gold)


def fixed_lookahead_decode(model: StreamingTagger, token_ids: Sequence[int], la: int,
                           utterance_id: str = "", gold=None) -> PredictionLog:
    """Label tokens j <= i - la at prefix i; the final prefix labels everything."""
    if la < 0:
        raise ValueError("lookahead must be non-negative")
    n = len(token_ids)
    dis, _ = _prefix_outputs(model, token_ids)
    rows = []
    for i in range(1, n + 1):
        labels = row_decisions(dis[i - 1, :i], (), force=True)
        decided = i if i == n else max(i - la, 0)
        rows.append(labels[:decided] + ABSTAIN * (i - decided))
    return PredictionLog(utterance_id, tuple(rows), gold)


def parse_decoder_name(name: str) -> int | None:
    """``dynamic`` -> None, ``la:K`` -> K."""
    if name == "dynamic":
        return None
    if name.startswith("la:") and name[3:].isdigit():
        return int(name[3:])
    raise ValueError(f"unknown decoder {name!r}; use 'dynamic' or 'la:K'")


def decode_corpus(model: StreamingTagger, corpus, vocab, decoder: str = "dynamic",
                  threshold: float = 0.5) -> list[PredictionLog]:
    la = parse_decoder_name(decoder)
    logs = []
    for utt in corpus:
        ids = vocab.encode(utt.tokens)
        if la is None:
            logs.append(stream_decode(model, ids, threshold, utt.id, utt.labels))
        else:
            logs.append(fixed_lookahead_decode(model, ids, la, utt.id, utt.labels))
    # a token may go back to abstaining in a later prefix; this is a property
    # of the model rather than an error, so it is only reported
    flips = sum(lg.reabstentions() for lg in logs)
    if flips:
        logger.info("%s decoder: %d re-abstentions in %d utterances", decoder, flips,
                 sum(1 for lg in logs if lg.reabstentions()))
    return logs


def render_output(row: str, tokens: Sequence[str]) -> str:
    """Display string for one prefix: fluent tokens verbatim, disfluent ones as <DIS>."""
    parts = []
    for decision, token in zip(row, tokens):
        if decision == FLUENT:
            parts.append(token)
        elif decision == DISFLUENT:
            parts.append(DIS_MARK)
    if ABSTAIN in row:
        parts.append(WAIT_MARK)
    return " ".join(parts)


def render_log(log: PredictionLog, tokens: Sequence[str]) -> list[str]:
    return [render_output(row, tokens[:i]) for i, row in enumerate(log.rows, start=1)]


# ---------------------------------------------------------------------------
# Log files
# ---------------------------------------------------------------------------


def format_logs(logs: Iterable[PredictionLog]) -> str:
    chunks = []
    for log in logs:
        if log.gold is None:
            raise ValueError(f"{log.utterance_id}: logs need gold labels to be written")
        lines = [f"{log.utterance_id}\t{len(log)}", *log.rows, "".join(str(g) for g in log.gold)]
        chunks.append("\n".join(lines) + "\n")
    return "\n".join(chunks)


def write_log_file(logs: Iterable[PredictionLog], path) -> None:
    Path(path).write_text(format_logs(logs), encoding="utf-8", newline="\n")


def parse_logs(text: str) -> list[PredictionLog]:
    logs = []
    lines = text.split("\n")
    pos = 0
    while pos < len(lines):
        if lines[pos] == "":
            pos += 1
            continue
        head = lines[pos].split("\t")
        if len(head) != 2 or not head[1].isdigit() or int(head[1]) < 1:
            raise ValueError(f"line {pos + 1}: bad record header {lines[pos]!r}")
        uid, n = head[0], int(head[1])
        body = lines[pos + 1:pos + 2 + n]
        if len(body) != n + 1 or set(body[-1]) - {"0", "1"} or len(body[-1]) != n:
            raise ValueError(f"line {pos + 1}: truncated or malformed record {uid!r}")
        try:
            logs.append(PredictionLog(uid, tuple(body[:n]), tuple(int(c) for c in body[-1])))
        except ValueError as exc:
            raise ValueError(f"line {pos + 1}: {exc}") from None
        pos += n + 2
    return logs


def parse_log_file(path) -> list[PredictionLog]:
    return parse_logs(Path(path).read_text(encoding="utf-8"))
