"""Synthetic paired text/speech language and corpus construction.

Text is a first-order Markov chain over content ids. Each text id maps to a
fixed, prefix-free sequence of 2-4 speech ids (its "pronunciation"); speech
renderings may carry per-token substitution noise that stands in for
acoustic/ASR error.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, CorpusFormatError
from .model import BOS, EOS, MODE_SWITCH, N_RESERVED, Modality, Token
from .numerics import Rng


@dataclass(frozen=True)
class CorpusSpec:
    text_vocab: int = 256
    speech_vocab: int = 512
    markov_order: int = 1
    temperature: float = 0.5
    noise_prob: float = 0.0
    seed: int = 0
    min_expand: int = 2
    max_expand: int = 4

    def validate(self):
        if self.temperature <= 0:
            raise ContractViolation("transition temperature must be positive")
        if self.markov_order != 1:
            raise ContractViolation("only first-order chains are supported")
        if not 0 <= self.noise_prob < 1:
            raise ContractViolation("noise_prob must lie in [0, 1)")
        if min(self.text_vocab, self.speech_vocab) <= N_RESERVED + 1:
            raise ContractViolation("vocabularies too small for reserved ids")
        if not 1 <= self.min_expand <= self.max_expand:
            raise ContractViolation("bad expansion length range")


class AlignmentPair(NamedTuple):
    text: tuple
    speech: tuple


@dataclass
class SyntheticLanguage:
    spec: CorpusSpec
    transition: np.ndarray  # (n_content, n_content), row-stochastic
    codebook: dict  # text id -> tuple of speech ids
    inverse: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.inverse = {v: k for k, v in self.codebook.items()}

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, self.spec.text_vocab)

    def next_id(self, prev: int | None, rng: Rng, allowed=None) -> int:
        """Draw the token following ``prev`` (uniform start when prev is None)."""
        n = self.spec.text_vocab - N_RESERVED
        if prev is None:
            weights = np.ones(n)
        else:
            weights = self.transition[prev - N_RESERVED].copy()
        if allowed is not None:
            weights = weights * allowed
            if weights.sum() <= 0:
                weights = allowed.astype(float)
        return N_RESERVED + rng.categorical(weights)

    def sample_text(self, length: int, rng: Rng, prev: int | None = None) -> list[int]:
        out = []
        for _ in range(length):
            prev = self.next_id(prev, rng)
            out.append(prev)
        return out

    def expand(self, text_ids) -> list[int]:
        out = []
        for t in text_ids:
            out.extend(self.codebook[t])
        return out

    def corrupt(self, speech_ids, rng: Rng, noise_prob=None) -> list[int]:
        """Per-token substitution by a different content speech id."""
        p = self.spec.noise_prob if noise_prob is None else noise_prob
        hi = self.spec.speech_vocab - 1
        out = []
        for s in speech_ids:
            if p > 0 and rng.random() < p:
                r = rng.randint(N_RESERVED, hi - 1)
                out.append(r + 1 if r >= s else r)
            else:
                out.append(s)
        return out

    def decode_speech(self, speech_ids) -> list[int]:
        """Greedy inverse-codebook decoding of a noiseless speech stream."""
        out = []
        pos = 0
        lengths = range(self.spec.min_expand, self.spec.max_expand + 1)
        while pos < len(speech_ids):
            for L in lengths:
                key = tuple(speech_ids[pos:pos + L])
                if len(key) == L and key in self.inverse:
                    out.append(self.inverse[key])
                    pos += L
                    break
            else:
                raise ContractViolation(f"undecodable speech at offset {pos}")
        return out

    def transcribe(self, speech_ids, spans) -> list[int]:
        """Simulated ASR: nearest codeword (Hamming) for each aligned span."""
        out = []
        for s0, s1 in spans:
            seg = tuple(speech_ids[s0:s1])
            best, best_d = None, None
            for t in self.content_ids:
                cw = self.codebook[t]
                if len(cw) != len(seg):
                    continue
                d = sum(a != b for a, b in zip(cw, seg))
                if best_d is None or d < best_d:
                    best, best_d = t, d
                    if d == 0:
                        break
            out.append(best)
        return out

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.__dict__,
            "transition": self.transition.tolist(),
            "codebook": {str(k): list(v) for k, v in sorted(self.codebook.items())},
        }

    @classmethod
    def from_dict(cls, d) -> "SyntheticLanguage":
        return cls(
            CorpusSpec(**d["spec"]),
            np.asarray(d["transition"], dtype=np.float64),
            {int(k): tuple(v) for k, v in d["codebook"].items()},
        )


def gen_language(spec: CorpusSpec, rng: Rng) -> SyntheticLanguage:
    spec.validate()
    n = spec.text_vocab - N_RESERVED
    logits = np.array([[rng.normal() for _ in range(n)] for _ in range(n)], dtype=np.float64)
    z = logits / spec.temperature
    z -= z.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)

    codebook: dict[int, tuple] = {}
    used: set = set()
    prefixes: set = set()
    for t in range(N_RESERVED, spec.text_vocab):
        for _ in range(10_000):
            L = rng.randint(spec.min_expand, spec.max_expand)
            cw = tuple(rng.randint(N_RESERVED, spec.speech_vocab - 1) for _ in range(L))
            # prefix-free: no codeword may be a prefix of another
            if cw in prefixes or any(cw[:i] in used for i in range(1, L + 1)):
                continue
            break
        else:
            raise ContractViolation("speech vocabulary too small for a prefix-free codebook")
        codebook[t] = cw
        used.add(cw)
        prefixes.update(cw[:i] for i in range(1, L + 1))
    return SyntheticLanguage(spec, probs, codebook)


@dataclass
class PairedSample:
    text: list
    speech: list
    pairs: list


def sample_paired(lang: SyntheticLanguage, length: int, rng: Rng, prev: int | None = None) -> PairedSample:
    if length < 1:
        raise ContractViolation("length must be >= 1")
    text_ids = lang.sample_text(length, rng, prev)
    speech_ids = []
    pairs = []
    for i, t in enumerate(text_ids):
        cw = lang.codebook[t]
        start = len(speech_ids)
        speech_ids.extend(cw)
        pairs.append(AlignmentPair((i, i + 1), (start, start + len(cw))))
    return PairedSample(text_ids, lang.corrupt(speech_ids, rng), pairs)


# --------------------------------------------------------------------------
# records


class RecordKind(str, Enum):
    INTERLEAVED = "interleaved"
    UNSUPERVISED = "unsup"
    SFT = "sft"
    TEXT = "text"


@dataclass
class Chunk:
    modality: Modality
    ids: list


@dataclass
class InterleavedRecord:
    """One corpus unit.

    For interleaved records each alignment pair maps a span of the underlying
    transcript (text-token positions in chunk order) to a span of the
    record's speech stream (speech chunks concatenated).
    """

    id: int
    kind: RecordKind
    chunks: list
    pairs: list = field(default_factory=list)

    def speech_stream(self) -> list[int]:
        return [i for c in self.chunks if c.modality == Modality.SPEECH for i in c.ids]

    def tokens(self) -> list[Token]:
        """Render as a model sequence: BOS, chunks joined by MODE_SWITCH at modality changes, EOS."""
        seq = [Token(self.chunks[0].modality, BOS)]
        prev = self.chunks[0].modality
        for c in self.chunks:
            if c.modality != prev:
                seq.append(Token(prev, MODE_SWITCH))
                prev = c.modality
            seq.extend(Token(c.modality, i) for i in c.ids)
        seq.append(Token(prev, EOS))
        return seq

    def supervision(self) -> list[bool]:
        """Per-position loss flags; SFT records supervise only the answer side."""
        seq = self.tokens()
        n = len(seq)
        if self.kind != RecordKind.SFT:
            return [True] * (n - 1) + [False]
        q = self.chunks[0]
        first_answer = 1 + len(q.ids)  # MODE_SWITCH or first answer token
        return [p + 1 >= first_answer and p < n - 1 for p in range(n)]


def chunk_interleave(paired: PairedSample, min_chunk: int, max_chunk: int, rng: Rng, record_id: int = 0) -> InterleavedRecord:
    if min_chunk < 1 or min_chunk > max_chunk:
        raise ContractViolation("need 1 <= min_chunk <= max_chunk")
    n = len(paired.text)
    if n == 0:
        raise ContractViolation("empty paired sample")
    bounds = []
    pos = 0
    while pos < n:
        end = min(pos + rng.randint(min_chunk, max_chunk), n)
        bounds.append((pos, end))
        pos = end
    mods = [Modality.SPEECH if rng.random() < 0.5 else Modality.TEXT for _ in bounds]
    if len(bounds) > 1 and len(set(mods)) == 1:
        mods[-1] = mods[-1].other
    chunks, pairs = [], []
    speech_pos = 0
    for (a, b), m in zip(bounds, mods):
        if m == Modality.TEXT:
            chunks.append(Chunk(Modality.TEXT, list(paired.text[a:b])))
            continue
        ids = []
        for p in paired.pairs[a:b]:
            s0, s1 = p.speech
            seg = paired.speech[s0:s1]
            pairs.append(AlignmentPair(p.text, (speech_pos + len(ids), speech_pos + len(ids) + len(seg))))
            ids.extend(seg)
        chunks.append(Chunk(Modality.SPEECH, ids))
        speech_pos += len(ids)
    return InterleavedRecord(record_id, RecordKind.INTERLEAVED, chunks, pairs)


def recover_text(record: InterleavedRecord, lang: SyntheticLanguage) -> list[int]:
    """Map an interleaved record back to its transcript via pairs + inverse codebook."""
    speech = record.speech_stream()
    by_start = {p.speech[0]: p for p in record.pairs}
    out = []
    speech_pos = 0
    for c in record.chunks:
        if c.modality == Modality.TEXT:
            out.extend(c.ids)
            continue
        end = speech_pos + len(c.ids)
        while speech_pos < end:
            p = by_start[speech_pos]
            out.append(lang.inverse[tuple(speech[p.speech[0]:p.speech[1]])])
            speech_pos = p.speech[1]
    return out


def unsupervised_record(paired: PairedSample, record_id: int) -> InterleavedRecord:
    return InterleavedRecord(record_id, RecordKind.UNSUPERVISED, [Chunk(Modality.SPEECH, list(paired.speech))])


def text_record(text_ids, record_id: int) -> InterleavedRecord:
    return InterleavedRecord(record_id, RecordKind.TEXT, [Chunk(Modality.TEXT, list(text_ids))])


# --------------------------------------------------------------------------
# quality filtering


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    """Levenshtein distance (unit costs) divided by reference length."""
    if len(reference) == 0:
        raise ContractViolation("empty reference")
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, 1):
        cur = [i]
        for j, h in enumerate(hypothesis, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1] / len(reference)


@dataclass
class FilterResult:
    kept: list
    rejected: list  # (record_id, wer)
    errors: list  # (record_id, message)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["record_id", "wer"])
            for rid, e in self.rejected:
                w.writerow([rid, repr(e)])


def filter_corpus(items, threshold: float = 0.2) -> FilterResult:
    """Keep a record iff WER(reference, transcript) < threshold.

    ``items`` yields (record_id, reference, hypothesis). Per-record failures are
    collected in ``errors`` and the record is dropped.
    """
    if not 0 < threshold <= 1:
        raise ContractViolation("threshold must lie in (0, 1]")
    res = FilterResult([], [], [])
    for rid, ref, hyp in items:
        try:
            e = wer(ref, hyp)
        except ContractViolation as exc:
            res.errors.append((rid, str(exc)))
            continue
        if e < threshold:
            res.kept.append(rid)
        else:
            res.rejected.append((rid, e))
    return res


# --------------------------------------------------------------------------
# supervised fine-tuning pairs


class SftConfig(str, Enum):
    S2S = "S->S"
    S2T = "S->T"
    T2S = "T->S"
    T2T = "T->T"

    @property
    def modalities(self):
        q, a = self.value.split("->")
        to = {"S": Modality.SPEECH, "T": Modality.TEXT}
        return to[q], to[a]


SFT_CONFIGS = (SftConfig.S2S, SftConfig.S2T, SftConfig.T2S, SftConfig.T2T)


@dataclass
class SftPair:
    content_id: int
    config: SftConfig
    question: list  # Tokens, BOS first
    answer: list  # Tokens, EOS last
    reference: list = field(default_factory=list)  # text ids of speech sides
    transcript: list = field(default_factory=list)  # simulated ASR of speech sides

    def decoded(self, lang: SyntheticLanguage) -> tuple[list, list]:
        """Both sides as text ids (speech sides via inverse codebook)."""

        def side(tokens):
            body = [t for t in tokens if t.id >= N_RESERVED]
            if body and body[0].modality == Modality.SPEECH:
                return lang.decode_speech([t.id for t in body])
            return [t.id for t in body]

        return side(self.question), side(self.answer)

    def to_record(self, record_id: int) -> InterleavedRecord:
        q = [t.id for t in self.question[1:]]
        a = [t.id for t in self.answer[:-1]]
        mq, ma = self.config.modalities
        return InterleavedRecord(record_id, RecordKind.SFT, [Chunk(mq, q), Chunk(ma, a)])


def build_sft(lang: SyntheticLanguage, content_pool, mix, rng: Rng) -> list[SftPair]:
    """Render each (question_ids, answer_ids) content item in a sampled modality config.

    ``mix`` gives weights for (S->S, S->T, T->S, T->T).
    """
    mix = list(mix)
    if len(mix) != 4 or abs(sum(mix) - 1.0) > 1e-9 or min(mix) < 0:
        raise ContractViolation("mix must be 4 non-negative weights summing to 1")
    out = []
    for cid, (q_ids, a_ids) in enumerate(content_pool):
        cfg = SFT_CONFIGS[rng.categorical(mix)]
        mq, ma = cfg.modalities
        reference, transcript = [], []

        def render(ids, m):
            if m == Modality.TEXT:
                return [Token(m, i) for i in ids]
            clean = lang.expand(ids)
            noisy = lang.corrupt(clean, rng)
            spans, pos = [], 0
            for t in ids:
                L = len(lang.codebook[t])
                spans.append((pos, pos + L))
                pos += L
            reference.extend(ids)
            transcript.extend(lang.transcribe(noisy, spans))
            return [Token(m, i) for i in noisy]

        question = [Token(mq, BOS)] + render(q_ids, mq)
        answer = render(a_ids, ma) + [Token(ma, EOS)]
        out.append(SftPair(cid, cfg, question, answer, reference, transcript))
    return out


# --------------------------------------------------------------------------
# persistence


_MOD_CODE = {Modality.TEXT: "t", Modality.SPEECH: "s"}
_CODE_MOD = {v: k for k, v in _MOD_CODE.items()}


def record_to_json(r: InterleavedRecord) -> str:
    d = {
        "id": r.id,
        "kind": r.kind.value,
        "chunks": [{"m": _MOD_CODE[c.modality], "ids": list(c.ids)} for c in r.chunks],
        "pairs": [[list(p.text), list(p.speech)] for p in r.pairs],
    }
    return json.dumps(d, separators=(",", ":"))


def record_from_json(line: str, lineno: int = 0) -> InterleavedRecord:
    try:
        d = json.loads(line)
        if set(d) != {"id", "kind", "chunks", "pairs"}:
            raise ValueError(f"unexpected keys {sorted(d)}")
        chunks = []
        for c in d["chunks"]:
            ids = c["ids"]
            if set(c) != {"m", "ids"} or not all(isinstance(i, int) and i >= 0 for i in ids):
                raise ValueError("malformed chunk")
            chunks.append(Chunk(_CODE_MOD[c["m"]], list(ids)))
        pairs = [AlignmentPair(tuple(t), tuple(s)) for t, s in d["pairs"]]
        if not isinstance(d["id"], int) or d["id"] < 0:
            raise ValueError("id must be a non-negative integer")
        return InterleavedRecord(d["id"], RecordKind(d["kind"]), chunks, pairs)
    except (ValueError, KeyError, TypeError) as exc:
        raise CorpusFormatError(lineno, str(exc)) from None


def save_corpus(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(record_to_json(r))
            f.write("\n")


def load_corpus(path) -> list[InterleavedRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            out.append(record_from_json(line, lineno))
    return out


def save_language(lang: SyntheticLanguage, path) -> None:
    Path(path).write_text(json.dumps(lang.to_dict(), separators=(",", ":")))


def load_language(path) -> SyntheticLanguage:
    return SyntheticLanguage.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# full synthetic corpus


@dataclass
class CorpusConfig:
    n_interleaved: int = 4000
    n_unsup: int = 1000
    n_text: int = 4000
    n_sft: int = 2000
    min_len: int = 16
    max_len: int = 40
    min_chunk: int = 6
    max_chunk: int = 12
    sft_question_len: int = 8
    sft_answer_len: int = 8
    sft_mix: tuple = (0.25, 0.25, 0.25, 0.25)


@dataclass
class Corpus:
    language: SyntheticLanguage
    interleaved: list
    unsup: list
    text: list
    sft: list
    sft_pairs: list


def build_corpus(spec: CorpusSpec, cfg: CorpusConfig) -> Corpus:
    """Deterministic corpus: record r draws from Rng(seed ^ r), ids are global and 1-based."""
    lang = gen_language(spec, Rng(spec.seed))
    rid = 0

    def next_rng():
        nonlocal rid
        rid += 1
        return rid, Rng(spec.seed ^ rid)

    interleaved, unsup, text_recs = [], [], []
    for _ in range(cfg.n_interleaved):
        i, rng = next_rng()
        paired = sample_paired(lang, rng.randint(cfg.min_len, cfg.max_len), rng)
        interleaved.append(chunk_interleave(paired, cfg.min_chunk, cfg.max_chunk, rng, i))
    for _ in range(cfg.n_unsup):
        i, rng = next_rng()
        unsup.append(unsupervised_record(sample_paired(lang, rng.randint(cfg.min_len, cfg.max_len), rng), i))
    for _ in range(cfg.n_text):
        i, rng = next_rng()
        text_recs.append(text_record(lang.sample_text(rng.randint(cfg.min_len, cfg.max_len), rng), i))
    i, rng = next_rng()
    pool = []
    for _ in range(cfg.n_sft):
        q = lang.sample_text(cfg.sft_question_len, rng)
        a = lang.sample_text(cfg.sft_answer_len, rng, prev=q[-1])
        pool.append((q, a))
    pairs = build_sft(lang, pool, cfg.sft_mix, rng)
    sft = []
    for p in pairs:
        i, _ = next_rng()
        sft.append(p.to_record(i))
    return Corpus(lang, interleaved, unsup, text_recs, sft, pairs)
