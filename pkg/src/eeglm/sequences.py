"""Hybrid token sequences mixing text ids, continuous rows, and signal tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError, ConfigError
from .hashing import fnv1a_64

SEM_SLOT = -1  # placeholder id at positions carrying continuous embeddings


@dataclass(frozen=True)
class VocabSpec:
    """Partition of the expanded vocabulary: text ids, signal ids, markers."""

    v_text: int = 512
    n_codes: int = 8192

    def __post_init__(self):
        if self.v_text < 2:
            raise ConfigError(f"text vocabulary must hold >= 2 ids, got {self.v_text}")
        if self.n_codes < 1:
            raise ConfigError(f"need at least one signal code, got {self.n_codes}")

    @property
    def eeg_offset(self) -> int:
        return self.v_text

    @property
    def bos(self) -> int:
        return self.v_text + self.n_codes

    @property
    def sep(self) -> int:
        return self.bos + 1

    @property
    def eos(self) -> int:
        return self.bos + 2

    @property
    def v_total(self) -> int:
        return self.v_text + self.n_codes + 3


class WhitespaceTokenizer:
    """Hash words into a fixed text vocabulary; id 0 stays reserved."""

    def __init__(self, vocab_size: int = 512):
        if vocab_size < 2:
            raise ConfigError(f"tokenizer vocabulary must be >= 2, got {vocab_size}")
        self.vocab_size = vocab_size

    def encode(self, text: str) -> np.ndarray:
        ids = [1 + fnv1a_64(w) % (self.vocab_size - 1) for w in text.lower().split()]
        return np.asarray(ids, dtype=np.int64)

    def ensure_distinct(self, labels: tuple[str, ...]) -> dict[str, int]:
        """Map labels to their leading token id, refusing hash collisions."""
        leading: dict[str, int] = {}
        for label in labels:
            ids = self.encode(label)
            if ids.size == 0:
                raise ConfigError(f"label {label!r} encodes to no tokens")
            leading[label] = int(ids[0])
        seen: dict[int, str] = {}
        for label, tok in leading.items():
            if tok in seen:
                raise ConfigError(
                    f"labels {seen[tok]!r} and {label!r} collide on token id {tok}; "
                    "rename a label or enlarge the text vocabulary"
                )
            seen[tok] = label
        return leading


@dataclass(frozen=True)
class HybridSequence:
    """BOS, text span, SEP, sem span, SEP, signal span, [SEP, instr, answer,] EOS."""

    ids: np.ndarray = field(repr=False)
    sem: np.ndarray | None = field(repr=False)
    spans: dict[str, tuple[int, int]]  # half-open [start, end)
    vocab: VocabSpec

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        object.__setattr__(self, "ids", ids)
        n = ids.size
        occupied = np.zeros(n, dtype=bool)
        for name, (s, e) in self.spans.items():
            if not (0 <= s <= e <= n):
                raise AssemblyError(f"span {name!r} [{s}, {e}) leaves the sequence (length {n})")
            if occupied[s:e].any():
                raise AssemblyError(f"span {name!r} overlaps another span")
            occupied[s:e] = True
        sem_s, sem_e = self.spans.get("sem", (0, 0))
        sem_len = 0 if self.sem is None else int(self.sem.shape[0])
        if sem_e - sem_s != sem_len:
            raise AssemblyError(
                f"sem span holds {sem_e - sem_s} slots but {sem_len} continuous rows given"
            )
        slot_positions = set(np.flatnonzero(ids == SEM_SLOT).tolist())
        if slot_positions != set(range(sem_s, sem_e)):
            raise AssemblyError("continuous-slot markers must fill exactly the sem span")
        for name in ("text", "instr", "answer"):
            s, e = self.spans.get(name, (0, 0))
            segment = ids[s:e]
            if segment.size and (segment.min() < 0 or segment.max() >= self.vocab.v_text):
                raise AssemblyError(f"{name} span carries ids outside [0, {self.vocab.v_text})")
        s, e = self.spans.get("eeg", (0, 0))
        segment = ids[s:e]
        lo, hi = self.vocab.eeg_offset, self.vocab.eeg_offset + self.vocab.n_codes
        if segment.size and (segment.min() < lo or segment.max() >= hi):
            raise AssemblyError(f"eeg span carries ids outside [{lo}, {hi})")
        if n < 2 or ids[0] != self.vocab.bos or ids[-1] != self.vocab.eos:
            raise AssemblyError("sequence must start with BOS and end with EOS")

    @property
    def length(self) -> int:
        return int(self.ids.size)

    def span_positions(self, name: str) -> np.ndarray:
        s, e = self.spans.get(name, (0, 0))
        return np.arange(s, e)


def assemble_sequence(
    text_ids,
    sem: np.ndarray | None,
    eeg_ids,
    vocab: VocabSpec,
    instruction_ids=None,
    answer_ids=None,
) -> HybridSequence:
    """Lay out one hybrid sequence and record its span table."""
    text_ids = np.asarray(text_ids, dtype=np.int64)
    eeg_ids = np.asarray(eeg_ids, dtype=np.int64)
    if text_ids.size and (text_ids.min() < 0 or text_ids.max() >= vocab.v_text):
        raise AssemblyError(f"text ids must lie in [0, {vocab.v_text})")
    if eeg_ids.size and (eeg_ids.min() < 0 or eeg_ids.max() >= vocab.n_codes):
        raise AssemblyError(f"signal token indices must lie in [0, {vocab.n_codes})")
    sem_len = 0 if sem is None else int(np.asarray(sem).shape[0])

    parts = [np.array([vocab.bos], dtype=np.int64), text_ids]
    spans = {"text": (1, 1 + text_ids.size)}
    cursor = 1 + text_ids.size
    parts.append(np.array([vocab.sep], dtype=np.int64))
    cursor += 1
    spans["sem"] = (cursor, cursor + sem_len)
    parts.append(np.full(sem_len, SEM_SLOT, dtype=np.int64))
    cursor += sem_len
    parts.append(np.array([vocab.sep], dtype=np.int64))
    cursor += 1
    spans["eeg"] = (cursor, cursor + eeg_ids.size)
    parts.append(eeg_ids + vocab.eeg_offset)
    cursor += eeg_ids.size

    if answer_ids is not None:
        instruction_ids = (
            np.asarray(instruction_ids, dtype=np.int64)
            if instruction_ids is not None
            else np.zeros(0, dtype=np.int64)
        )
        answer_ids = np.asarray(answer_ids, dtype=np.int64)
        for name, seg in (("instruction", instruction_ids), ("answer", answer_ids)):
            if seg.size and (seg.min() < 0 or seg.max() >= vocab.v_text):
                raise AssemblyError(f"{name} ids must lie in [0, {vocab.v_text})")
        parts.append(np.array([vocab.sep], dtype=np.int64))
        cursor += 1
        spans["instr"] = (cursor, cursor + instruction_ids.size)
        parts.append(instruction_ids)
        cursor += instruction_ids.size
        spans["answer"] = (cursor, cursor + answer_ids.size)
        parts.append(answer_ids)
        cursor += answer_ids.size
    elif instruction_ids is not None:
        raise AssemblyError("instruction span requires an answer span")

    parts.append(np.array([vocab.eos], dtype=np.int64))
    ids = np.concatenate(parts)
    sem_arr = None if sem is None else np.asarray(sem, dtype=np.float64)
    return HybridSequence(ids=ids, sem=sem_arr, spans=spans, vocab=vocab)


def decode_sequence(seq: HybridSequence) -> dict[str, np.ndarray]:
    """Recover the original id groups (signal ids with the offset removed)."""
    out: dict[str, np.ndarray] = {}
    for name in ("text", "instr", "answer"):
        if name in seq.spans:
            s, e = seq.spans[name]
            out[name] = seq.ids[s:e].copy()
    s, e = seq.spans["eeg"]
    out["eeg"] = seq.ids[s:e] - seq.vocab.eeg_offset
    return out
