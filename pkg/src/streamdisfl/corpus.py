"""Disfluency annotation schema, synthetic corpus generator and TSV corpus files.

A corpus file holds one token per line as ``surface<TAB>role_code``; a blank
line ends an utterance and ``#`` lines are comments. A ``#id: <name>`` comment
names the utterance that follows it, otherwise the utterance is named by its
0-based position in the file.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class TokenRole(enum.Enum):
    FLUENT = "F"
    REPARANDUM = "RM"
    INTERREGNUM = "IM"
    REPAIR_ONSET = "RO"
    REPAIR = "RP"
    EDIT = "E"

    @property
    def code(self) -> str:
        return self.value

    @property
    def display_name(self) -> str:
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    TokenRole.FLUENT: "Fluent",
    TokenRole.REPARANDUM: "Reparandum",
    TokenRole.INTERREGNUM: "Interregnum",
    TokenRole.REPAIR_ONSET: "Repair onset",
    TokenRole.REPAIR: "Repair",
    TokenRole.EDIT: "Edit",
}

DISFLUENT_ROLES = frozenset({TokenRole.REPARANDUM, TokenRole.INTERREGNUM})
_ROLE_BY_CODE = {role.code: role for role in TokenRole}


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the offending line number."""

    def __init__(self, message: str, line_number: int | None = None, path=None):
        self.line_number = line_number
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line_number is not None:
            where += f"line {line_number}: "
        elif where:
            where += " "
        super().__init__(where + message)


def derive_binary_labels(roles: Sequence[TokenRole]) -> tuple[int, ...]:
    """Map roles to binary targets: reparanda and interregna are disfluent (1)."""
    if len(roles) == 0:
        raise ValueError("cannot derive labels for an empty role sequence")
    return tuple(1 if TokenRole(r) in DISFLUENT_ROLES else 0 for r in roles)


@dataclass(frozen=True)
class Utterance:
    id: str
    tokens: tuple[str, ...]
    roles: tuple[TokenRole, ...]
    labels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "roles", tuple(TokenRole(r) for r in self.roles))
        if len(self.tokens) == 0:
            raise ValueError(f"utterance {self.id!r} has no tokens")
        if len(self.tokens) != len(self.roles):
            raise ValueError(
                f"utterance {self.id!r}: {len(self.tokens)} tokens but {len(self.roles)} roles"
            )
        derived = derive_binary_labels(self.roles)
        if not self.labels:
            object.__setattr__(self, "labels", derived)
        else:
            labels = tuple(int(v) for v in self.labels)
            if labels != derived:
                raise ValueError(f"utterance {self.id!r}: labels disagree with roles")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    """Parameters of the synthetic disfluency corpus.

    ``utterance_length_range`` counts the fluent skeleton words of an
    utterance; reparanda, interregna, repairs and edit terms are inserted on
    top of it. Fluent text never reuses any of the previous
    ``repeat_window`` base words, while every repair starts by repeating the
    first reparandum word (substitutions then replace at least one later
    word), so a repair is recognisable once it has been heard. Deletions
    have neither interregnum nor repair.

    A positive ``onset_vocab_size`` restricts reparandum onsets to the first
    that many base words, which then never end an utterance, so only a few
    words are ambiguous at the end of a prefix. The default 0 lets a
    reparandum start on any word.

    ``filler_lexicon`` holds the interregnum strings and ``edit_lexicon``
    the standalone edit terms. By default every interregnum filler can also
    occur as an edit term, so a filler's label depends on what follows it,
    while the edit-only fillers are fluent wherever they appear.
    """

    base_vocab_size: int = 16
    utterance_length_range: tuple[int, int] = (3, 10)
    disfluency_rate: float = 0.2
    repetition_fraction: float = 0.5
    substitution_fraction: float = 0.4
    deletion_fraction: float = 0.1
    interregnum_probability: float = 0.4
    filler_lexicon: tuple[str, ...] = ("uh", "i mean", "you know")
    edit_rate: float = 0.18
    edit_lexicon: tuple[str, ...] = ("uh", "i mean", "you know", "um", "well", "like")
    reparandum_length_range: tuple[int, int] = (1, 3)
    repeat_window: int = 3
    onset_vocab_size: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "utterance_length_range", tuple(self.utterance_length_range))
        object.__setattr__(self, "reparandum_length_range", tuple(self.reparandum_length_range))
        object.__setattr__(self, "filler_lexicon", tuple(self.filler_lexicon))
        object.__setattr__(self, "edit_lexicon", tuple(self.edit_lexicon))
        self.validate()

    def validate(self) -> None:
        for name in ("disfluency_rate", "interregnum_probability", "edit_rate",
                     "repetition_fraction", "substitution_fraction", "deletion_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        total = self.repetition_fraction + self.substitution_fraction + self.deletion_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"repair-type fractions must sum to 1, got {total}")
        lo, hi = self.utterance_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad utterance_length_range {self.utterance_length_range}")
        lo, hi = self.reparandum_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad reparandum_length_range {self.reparandum_length_range}")
        if self.repeat_window < hi:
            raise ValueError("repeat_window must cover the longest reparandum")
        if self.base_vocab_size <= 2 * self.repeat_window + hi:
            raise ValueError("base_vocab_size too small for repeat_window")
        if self.onset_vocab_size and not (self.repeat_window < self.onset_vocab_size
                                          and self.base_vocab_size - self.onset_vocab_size > self.repeat_window):
            raise ValueError("onset_vocab_size and the remaining base words must both exceed repeat_window")
        for name in ("filler_lexicon", "edit_lexicon"):
            lexicon = getattr(self, name)
            if not lexicon or any(not f.split() for f in lexicon):
                raise ValueError(f"{name} must hold non-empty entries")
            if any(w.startswith("w") and w[1:].isdigit() for f in lexicon for w in f.split()):
                raise ValueError(f"{name} entries must not look like base words")

    def reparandum_lengths(self, kind: str) -> range:
        lo, hi = self.reparandum_length_range
        if kind == "substitution" and hi >= 2:
            lo = max(lo, 2)
        return range(lo, hi + 1)

    def expected_disfluent_fraction(self) -> float:
        """Pooled fraction of disfluent tokens implied by the mixture weights."""
        mean_filler = float(np.mean([len(f.split()) for f in self.filler_lexicon]))
        q = self.interregnum_probability
        disfluent = tokens = 0.0
        for kind, weight in (("repetition", self.repetition_fraction),
                             ("substitution", self.substitution_fraction),
                             ("deletion", self.deletion_fraction)):
            r = float(np.mean(self.reparandum_lengths(kind)))
            repaired = kind != "deletion"
            disfluent += weight * (r + repaired * q * mean_filler)
            tokens += weight * (r + repaired * (q * mean_filler + r))
        p_d, p_e = self.disfluency_rate, self.edit_rate
        mean_edit = float(np.mean([len(f.split()) for f in self.edit_lexicon]))
        return p_d * disfluent / (1.0 + p_d * tokens + (1.0 - p_d) * p_e * mean_edit)


_KINDS = ("repetition", "substitution", "deletion")


def _generate_one(rng, config: GeneratorConfig, uid: str) -> Utterance:
    fillers = [tuple(f.split()) for f in config.filler_lexicon]
    edits = [tuple(f.split()) for f in config.edit_lexicon]
    tokens: list[str] = []
    roles: list[TokenRole] = []
    base: list[int] = []  # base word ids in order, fillers excluded

    def emit(word, role):
        tokens.append(word if isinstance(word, str) else f"w{word}")
        roles.append(role)
        if not isinstance(word, str):
            base.append(word)

    def sample_word(avoid=(), pool=config.base_vocab_size, start=0):
        recent = set(base[max(0, len(base) - config.repeat_window):]) | set(avoid)
        allowed = [w for w in range(start, pool) if w not in recent]
        return allowed[int(rng.integers(len(allowed)))]

    def emit_filler(lexicon, role):
        for w in lexicon[int(rng.integers(len(lexicon)))]:
            emit(w, role)

    n_skeleton = int(rng.integers(config.utterance_length_range[0], config.utterance_length_range[1] + 1))
    mix = np.array([config.repetition_fraction, config.substitution_fraction, config.deletion_fraction])
    for slot in range(n_skeleton):
        if rng.random() < config.disfluency_rate:
            kind = _KINDS[int(rng.choice(3, p=mix / mix.sum()))]
            lengths = config.reparandum_lengths(kind)
            r = int(lengths[int(rng.integers(len(lengths)))])
            reparandum: list[int] = []
            for _ in range(r):
                pool = config.onset_vocab_size if not reparandum and config.onset_vocab_size else config.base_vocab_size
                reparandum.append(sample_word(reparandum, pool))
            for w in reparandum:
                emit(w, TokenRole.REPARANDUM)
            if kind != "deletion":
                if rng.random() < config.interregnum_probability:
                    emit_filler(fillers, TokenRole.INTERREGNUM)
                repair = list(reparandum)
                if kind == "substitution":
                    keep_first = 1 if r >= 2 else 0
                    n_replace = int(rng.integers(1, r - keep_first + 1))
                    picks = rng.choice(np.arange(keep_first, r), size=n_replace, replace=False)
                    for pos in sorted(int(p) for p in picks):
                        repair[pos] = sample_word(repair)
                for idx, w in enumerate(repair):
                    emit(w, TokenRole.REPAIR_ONSET if idx == 0 else TokenRole.REPAIR)
        elif rng.random() < config.edit_rate:
            emit_filler(edits, TokenRole.EDIT)
        # onset words never end an utterance
        emit(sample_word(start=config.onset_vocab_size if slot == n_skeleton - 1 else 0), TokenRole.FLUENT)
    return Utterance(uid, tuple(tokens), tuple(roles))


def generate_corpus(config: GeneratorConfig, n_utterances: int) -> list[Utterance]:
    """Generate ``n_utterances`` annotated utterances, deterministically per ``config.seed``."""
    config.validate()
    if n_utterances < 0:
        raise ValueError("n_utterances must be non-negative")
    rng = np.random.default_rng(config.seed)
    width = max(5, len(str(max(n_utterances - 1, 0))))
    return [_generate_one(rng, config, f"utt{i:0{width}d}") for i in range(n_utterances)]


def split_corpus(corpus: Sequence[Utterance], ratios: Sequence[float], seed: int = 0):
    """Shuffle and cut the corpus into (train, dev, test) by ``ratios``.

    Sizes are floor(ratio * n) for dev and test, with the remainder in train.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_dev = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_dev - n_test
    picked = [corpus[int(i)] for i in order]
    return picked[:n_train], picked[n_train:n_train + n_dev], picked[n_train + n_dev:]


# ---------------------------------------------------------------------------
# TSV files
# ---------------------------------------------------------------------------


def format_corpus(corpus: Iterable[Utterance]) -> str:
    lines: list[str] = []
    for utt in corpus:
        if "\t" in utt.id or "\n" in utt.id:
            raise ValueError(f"utterance id {utt.id!r} cannot be written")
        lines.append(f"#id: {utt.id}")
        for tok, role in zip(utt.tokens, utt.roles):
            if not tok or any(ch in tok for ch in "\t\n\r") or tok.startswith("#"):
                raise ValueError(f"token {tok!r} in {utt.id!r} cannot be written")
            lines.append(f"{tok}\t{role.code}")
        lines.append("")
    return "\n".join(lines) + ("\n" if lines else "")


def write_corpus_file(corpus: Iterable[Utterance], path) -> None:
    Path(path).write_text(format_corpus(corpus), encoding="utf-8", newline="\n")


def parse_corpus(text: str, path=None) -> list[Utterance]:
    corpus: list[Utterance] = []
    tokens: list[str] = []
    roles: list[TokenRole] = []
    pending_id: str | None = None
    start_line = 0
    seen: set[str] = set()

    def flush(line_number):
        nonlocal tokens, roles, pending_id
        if not tokens:
            if pending_id is not None:
                raise CorpusFormatError(f"utterance {pending_id!r} has no tokens", line_number, path)
            return
        uid = pending_id if pending_id is not None else str(len(corpus))
        if uid in seen:
            raise CorpusFormatError(f"duplicate utterance id {uid!r}", start_line, path)
        seen.add(uid)
        corpus.append(Utterance(uid, tuple(tokens), tuple(roles)))
        tokens, roles, pending_id = [], [], None

    for n, raw in enumerate(text.split("\n"), start=1):
        line = raw.rstrip("\r")
        if line.strip() == "":
            flush(n)
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("id:"):
                if tokens:
                    raise CorpusFormatError("#id: comment inside an utterance", n, path)
                if pending_id is not None:
                    raise CorpusFormatError(f"utterance {pending_id!r} has no tokens", n, path)
                pending_id = body[3:].strip()
                if not pending_id:
                    raise CorpusFormatError("empty utterance id", n, path)
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0]:
            raise CorpusFormatError(f"expected 'surface<TAB>role', got {line!r}", n, path)
        surface, code = parts
        if code not in _ROLE_BY_CODE:
            raise CorpusFormatError(f"unknown role code {code!r}", n, path)
        if not tokens:
            start_line = n
        tokens.append(surface)
        roles.append(_ROLE_BY_CODE[code])
    flush(None)
    return corpus


def parse_corpus_file(path) -> list[Utterance]:
    return parse_corpus(Path(path).read_text(encoding="utf-8"), path=path)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

PAD, UNK, BOS = "<pad>", "<unk>", "<s>"


@dataclass
class Vocabulary:
    """Closed word vocabulary; ids 0, 1, 2 are reserved for pad, unknown and start."""

    words: list[str] = field(default_factory=lambda: [PAD, UNK, BOS])

    def __post_init__(self):
        if self.words[:3] != [PAD, UNK, BOS]:
            raise ValueError("vocabulary must start with the reserved symbols")
        self._index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, corpus: Iterable[Utterance], min_count: int = 1) -> "Vocabulary":
        counts = Counter(tok for utt in corpus for tok in utt.tokens)
        words = sorted(w for w, c in counts.items() if c >= min_count)
        return cls([PAD, UNK, BOS] + words)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def bos_id(self) -> int:
        return 2

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, 1) for t in tokens]
