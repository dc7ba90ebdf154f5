"""Modality-split transformer.

A shared trunk of pre-norm blocks consumes text or speech tokens; its final
hidden state feeds two structurally identical branches (text and speech),
each ending in its own LM head. Also here: the plain text transformer used
as the pretrained base, the merged-vocabulary baseline without a split,
sampling, and the binary checkpoint format.
"""
from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import asdict, dataclass
from enum import Enum, IntEnum
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .errors import ContractViolation, NoSupervisedPositions
from .numerics import (
    Group,
    ParamTensor,
    Rng,
    causal_attention,
    cross_entropy_sum,
    gelu,
    layer_norm,
    linear,
    log_softmax,
    normal_init,
)

BOS, MODE_SWITCH, EOS = 0, 1, 2
N_RESERVED = 3
INIT_STD = 0.02

MAGIC = b"MSPL"
FORMAT_VERSION = 1


class Modality(IntEnum):
    TEXT = 0
    SPEECH = 1

    @property
    def other(self) -> "Modality":
        return Modality(1 - self)


class Token(NamedTuple):
    modality: Modality
    id: int


def text(ids) -> list[Token]:
    return [Token(Modality.TEXT, int(i)) for i in ids]


def speech(ids) -> list[Token]:
    return [Token(Modality.SPEECH, int(i)) for i in ids]


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_shared: int = 8
    n_branch: int = 2
    text_vocab: int = 256
    speech_vocab: int = 512
    max_seq: int = 512

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "max_seq"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ContractViolation("n_heads must divide d_model")
        if self.n_shared < 1:
            raise ContractViolation("n_shared must be >= 1")
        if self.n_branch < 1:
            raise ContractViolation("n_branch must be >= 1")
        if min(self.text_vocab, self.speech_vocab) < 4:
            raise ContractViolation("vocabularies need at least 4 ids")

    @property
    def n_layers(self) -> int:
        return self.n_shared + self.n_branch

    def vocab(self, modality: Modality) -> int:
        return self.text_vocab if modality == Modality.TEXT else self.speech_vocab

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceBatch:
    """Right-padded batch of token sequences.

    ``target_mod[b, p]`` is the modality of token p+1 (-1 where undefined) and
    selects which head is scored at position p.
    """

    ids: torch.Tensor
    mods: torch.Tensor
    target_mod: torch.Tensor
    loss_mask: torch.Tensor
    lengths: list

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[Token]], supervise=None) -> "SequenceBatch":
        if not seqs:
            raise ContractViolation("empty batch")
        L = max(len(s) for s in seqs)
        B = len(seqs)
        ids = torch.zeros(B, L, dtype=torch.long)
        mods = torch.zeros(B, L, dtype=torch.long)
        target_mod = torch.full((B, L), -1, dtype=torch.long)
        loss_mask = torch.zeros(B, L, dtype=torch.bool)
        for b, seq in enumerate(seqs):
            n = len(seq)
            if n == 0:
                raise ContractViolation("empty sequence in batch")
            ids[b, :n] = torch.tensor([t.id for t in seq])
            mods[b, :n] = torch.tensor([int(t.modality) for t in seq])
            if n > 1:
                target_mod[b, : n - 1] = mods[b, 1:n]
            if supervise is None:
                loss_mask[b, : n - 1] = True
            else:
                flags = torch.tensor(list(supervise[b]), dtype=torch.bool)
                if flags.shape[0] != n:
                    raise ContractViolation("supervision mask length differs from sequence length")
                loss_mask[b, :n] = flags & (target_mod[b, :n] >= 0)
        return cls(ids, mods, target_mod, loss_mask, [len(s) for s in seqs])

    @property
    def shape(self):
        return tuple(self.ids.shape)

    def targets(self) -> torch.Tensor:
        t = torch.zeros_like(self.ids)
        t[:, :-1] = self.ids[:, 1:]
        return t


@dataclass
class ForwardOutput:
    hidden: list
    text_branch_input: torch.Tensor | None = None
    speech_branch_input: torch.Tensor | None = None
    text_logits: torch.Tensor | None = None
    speech_logits: torch.Tensor | None = None


BLOCK_TENSORS = (
    "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo",
    "ln2.g", "ln2.b", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
)


class _Transformer:
    kind = "abstract"

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, ParamTensor] = {}
        self.read_counts: Counter = Counter()

    # -- parameter store

    def p(self, name: str) -> torch.Tensor:
        self.read_counts[name] += 1
        return self.params[name].value

    def _add(self, name, value, group=Group.TEXT_BACKBONE):
        self.params[name] = ParamTensor(name, value, group)

    def _init_block(self, prefix, rng, group):
        c = self.config
        d, f = c.d_model, c.d_ff
        ones, zeros = torch.ones, torch.zeros
        self._add(f"{prefix}.ln1.g", ones(d), group)
        self._add(f"{prefix}.ln1.b", zeros(d), group)
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.attn.{w}", normal_init((d, d), INIT_STD, rng), group)
        self._add(f"{prefix}.ln2.g", ones(d), group)
        self._add(f"{prefix}.ln2.b", zeros(d), group)
        self._add(f"{prefix}.ff.w1", normal_init((d, f), INIT_STD, rng), group)
        self._add(f"{prefix}.ff.b1", zeros(f), group)
        self._add(f"{prefix}.ff.w2", normal_init((f, d), INIT_STD, rng), group)
        self._add(f"{prefix}.ff.b2", zeros(d), group)

    def _block(self, prefix, x):
        p = self.p
        h = layer_norm(x, p(f"{prefix}.ln1.g"), p(f"{prefix}.ln1.b"))
        a = causal_attention(
            linear(h, p(f"{prefix}.attn.wq")),
            linear(h, p(f"{prefix}.attn.wk")),
            linear(h, p(f"{prefix}.attn.wv")),
            self.config.n_heads,
        )
        x = x + linear(a, p(f"{prefix}.attn.wo"))
        h = layer_norm(x, p(f"{prefix}.ln2.g"), p(f"{prefix}.ln2.b"))
        return x + linear(gelu(linear(h, p(f"{prefix}.ff.w1"), p(f"{prefix}.ff.b1"))),
                          p(f"{prefix}.ff.w2"), p(f"{prefix}.ff.b2"))

    def _check_batch(self, batch: SequenceBatch):
        c = self.config
        if batch.ids.shape[1] > c.max_seq:
            raise ContractViolation(f"sequence length {batch.ids.shape[1]} exceeds max_seq={c.max_seq}")
        ids, mods = batch.ids, batch.mods
        for m in Modality:
            sel = mods == m
            if sel.any():
                vals = ids[sel]
                if int(vals.min()) < 0 or int(vals.max()) >= c.vocab(m):
                    raise ContractViolation(f"{m.name} token id out of range")

    # -- bookkeeping

    def parameters(self) -> list[ParamTensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def to(self, dtype) -> "_Transformer":
        for p in self.params.values():
            flag = p.trainable
            p.value = p.value.detach().to(dtype).requires_grad_(flag)
            p.exp_avg = p.exp_avg_sq = None
            p.step = 0
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def tensors(self) -> dict[str, torch.Tensor]:
        return {n: p.value.detach() for n, p in self.params.items()}

    def clone(self):
        other = self.__class__.__new__(self.__class__)
        _Transformer.__init__(other, self.config)
        for n, p in self.params.items():
            q = ParamTensor(n, p.value.detach().clone(), p.group, p.trainable)
            if p.exp_avg is not None:
                q.exp_avg = p.exp_avg.clone()
                q.exp_avg_sq = p.exp_avg_sq.clone()
                q.step = p.step
            other.params[n] = q
        return other

    # -- shared training surface

    def loss(self, batch: SequenceBatch):
        """Mean next-token cross-entropy over ``batch.loss_mask``.

        Returns (loss, {"loss_text": float|None, "loss_speech": float|None}).
        """
        if not bool(batch.loss_mask.any()):
            raise NoSupervisedPositions()
        tgt = batch.targets().reshape(-1)
        sel = {m: (batch.loss_mask & (batch.target_mod == m)).reshape(-1) for m in Modality}
        heads = tuple(m for m in Modality if bool(sel[m].any()))
        logits = self.head_logits(batch, heads)
        total = None
        count = 0
        stats = {"loss_text": None, "loss_speech": None}
        for m in heads:
            lg = logits[m]
            s, n = cross_entropy_sum(lg.reshape(-1, lg.shape[-1]), self._target_index(tgt, m), sel[m])
            stats["loss_" + m.name.lower()] = float(s.detach()) / n
            total = s if total is None else total + s
            count += n
        return total / count, stats

    def _target_index(self, tgt, modality):
        return tgt

    def next_token_logprobs(self, batch: SequenceBatch) -> torch.Tensor:
        """log p(token p+1 | prefix) at every position with a defined target; 0 elsewhere."""
        with torch.no_grad():
            tgt = batch.targets()
            heads = tuple(m for m in Modality if bool((batch.target_mod == m).any()))
            logits = self.head_logits(batch, heads)
            out = torch.zeros(batch.ids.shape, dtype=torch.float64)
            for m in heads:
                lp = log_softmax(logits[m].to(torch.float64))
                idx = self._target_index(tgt, m).clamp(0, lp.shape[-1] - 1)
                vals = lp.gather(2, idx.unsqueeze(-1)).squeeze(-1)
                sel = batch.target_mod == m
                out[sel] = vals[sel]
            return out


class TextTransformer(_Transformer):
    """Plain decoder-only text LM: the pretrained base the split model starts from."""

    kind = "base"

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        super().__init__(config)
        if rng is None:
            return
        c = config
        self._add("embed", normal_init((c.text_vocab, c.d_model), INIT_STD, rng))
        self._add("pos_embed", normal_init((c.max_seq, c.d_model), INIT_STD, rng))
        for i in range(c.n_layers):
            self._init_block(f"blocks.{i}", rng, Group.TEXT_BACKBONE)
        self._add("ln_f.g", torch.ones(c.d_model))
        self._add("ln_f.b", torch.zeros(c.d_model))
        self._add("head.w", normal_init((c.d_model, c.text_vocab), INIT_STD, rng))
        self._add("head.b", torch.zeros(c.text_vocab))

    def forward(self, batch: SequenceBatch) -> ForwardOutput:
        self._check_batch(batch)
        if bool((batch.mods != Modality.TEXT).any()):
            raise ContractViolation("base text model received speech tokens")
        L = batch.ids.shape[1]
        x = self.p("embed")[batch.ids] + self.p("pos_embed")[:L]
        hidden = [x]
        for i in range(self.config.n_layers):
            x = self._block(f"blocks.{i}", x)
            hidden.append(x)
        h = layer_norm(x, self.p("ln_f.g"), self.p("ln_f.b"))
        return ForwardOutput(hidden, text_branch_input=x, text_logits=linear(h, self.p("head.w"), self.p("head.b")))

    def head_logits(self, batch, heads):
        if Modality.SPEECH in heads:
            raise ContractViolation("base text model has no speech head")
        return {Modality.TEXT: self.forward(batch).text_logits}

    def text_logits(self, batch):
        return self.forward(batch).text_logits


class SplitTransformer(_Transformer):
    """Shared trunk forking into parallel text and speech branches."""

    kind = "split"

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        super().__init__(config)
        if rng is None:
            return
        c = config
        T, S = Group.TEXT_BACKBONE, Group.SPEECH_NEW
        self._add("text_embed", normal_init((c.text_vocab, c.d_model), INIT_STD, rng), T)
        self._add("speech_embed", normal_init((c.speech_vocab, c.d_model), INIT_STD, rng), S)
        self._add("pos_embed", normal_init((c.max_seq, c.d_model), INIT_STD, rng), T)
        for i in range(c.n_shared):
            self._init_block(f"shared.{i}", rng, T)
        for branch, group, vocab in (("text", T, c.text_vocab), ("speech", S, c.speech_vocab)):
            for j in range(c.n_branch):
                self._init_block(f"{branch}_branch.{j}", rng, group)
            self._add(f"{branch}_branch.ln_f.g", torch.ones(c.d_model), group)
            self._add(f"{branch}_branch.ln_f.b", torch.zeros(c.d_model), group)
            self._add(f"{branch}_head.w", normal_init((c.d_model, vocab), INIT_STD, rng), group)
            self._add(f"{branch}_head.b", torch.zeros(vocab), group)

    @staticmethod
    def group_of(name: str) -> Group:
        if name.startswith(("speech_embed", "speech_branch.", "speech_head")):
            return Group.SPEECH_NEW
        return Group.TEXT_BACKBONE

    def _embed(self, batch):
        ids, mods = batch.ids, batch.mods
        c = self.config
        is_text = mods == Modality.TEXT
        if bool(is_text.all()):
            x = self.p("text_embed")[ids]
        elif not bool(is_text.any()):
            x = self.p("speech_embed")[ids]
        else:
            te = self.p("text_embed")[ids.clamp(max=c.text_vocab - 1)]
            se = self.p("speech_embed")[ids.clamp(max=c.speech_vocab - 1)]
            x = torch.where(is_text.unsqueeze(-1), te, se)
        return x + self.p("pos_embed")[: ids.shape[1]]

    def trunk(self, batch: SequenceBatch):
        self._check_batch(batch)
        x = self._embed(batch)
        hidden = [x]
        for i in range(self.config.n_shared):
            x = self._block(f"shared.{i}", x)
            hidden.append(x)
        return hidden

    def branch(self, modality: Modality, x):
        name = "text" if modality == Modality.TEXT else "speech"
        for j in range(self.config.n_branch):
            x = self._block(f"{name}_branch.{j}", x)
        h = layer_norm(x, self.p(f"{name}_branch.ln_f.g"), self.p(f"{name}_branch.ln_f.b"))
        return linear(h, self.p(f"{name}_head.w"), self.p(f"{name}_head.b"))

    def forward(self, batch: SequenceBatch, heads=(Modality.TEXT, Modality.SPEECH)) -> ForwardOutput:
        """Run the trunk once and each requested branch on its final state.

        ``hidden`` holds the embedding output followed by every shared block's
        output.
        """
        hidden = self.trunk(batch)
        fork = hidden[-1]
        out = ForwardOutput(hidden)
        if Modality.TEXT in heads:
            out.text_branch_input = fork
            out.text_logits = self.branch(Modality.TEXT, fork)
        if Modality.SPEECH in heads:
            out.speech_branch_input = fork
            out.speech_logits = self.branch(Modality.SPEECH, fork)
        return out

    def head_logits(self, batch, heads):
        out = self.forward(batch, heads)
        return {m: out.text_logits if m == Modality.TEXT else out.speech_logits for m in heads}

    def text_logits(self, batch):
        return self.forward(batch, heads=(Modality.TEXT,)).text_logits


class NoSplitTransformer(_Transformer):
    """Single stack over a merged vocabulary: speech id s becomes text_vocab + s."""

    kind = "nosplit"

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        super().__init__(config)
        if rng is None:
            return
        c = config
        V = c.text_vocab + c.speech_vocab
        self._add("embed", normal_init((V, c.d_model), INIT_STD, rng))
        self._add("pos_embed", normal_init((c.max_seq, c.d_model), INIT_STD, rng))
        for i in range(c.n_layers):
            self._init_block(f"blocks.{i}", rng, Group.TEXT_BACKBONE)
        self._add("ln_f.g", torch.ones(c.d_model))
        self._add("ln_f.b", torch.zeros(c.d_model))
        self._add("head.w", normal_init((c.d_model, V), INIT_STD, rng))
        self._add("head.b", torch.zeros(V))

    def _merged(self, ids, mods):
        return ids + mods * self.config.text_vocab

    def forward(self, batch: SequenceBatch) -> ForwardOutput:
        self._check_batch(batch)
        L = batch.ids.shape[1]
        x = self.p("embed")[self._merged(batch.ids, batch.mods)] + self.p("pos_embed")[:L]
        hidden = [x]
        for i in range(self.config.n_layers):
            x = self._block(f"blocks.{i}", x)
            hidden.append(x)
        h = layer_norm(x, self.p("ln_f.g"), self.p("ln_f.b"))
        return ForwardOutput(hidden, text_logits=linear(h, self.p("head.w"), self.p("head.b")))

    def head_logits(self, batch, heads):
        logits = self.forward(batch).text_logits
        return {m: logits for m in heads}

    def _target_index(self, tgt, modality):
        return tgt + int(modality) * self.config.text_vocab

    def text_logits(self, batch):
        return self.forward(batch).text_logits


MODEL_KINDS = {cls.kind: cls for cls in (TextTransformer, SplitTransformer, NoSplitTransformer)}


# --------------------------------------------------------------------------
# construction from a pretrained base


def _copy(t):
    return t.detach().clone()


def build_split_model(base: TextTransformer, rng: Rng, config: ModelConfig | None = None) -> SplitTransformer:
    """Fork a pretrained text transformer into a split model.

    Blocks [0, n_shared) become the trunk; the last n_branch blocks become the
    text branch and are duplicated byte-for-byte into the speech branch. The
    speech embedding and speech head are freshly initialized.
    """
    config = config or base.config
    bc = base.config
    if (bc.d_model, bc.n_heads, bc.d_ff, bc.text_vocab, bc.max_seq) != (
        config.d_model, config.n_heads, config.d_ff, config.text_vocab, config.max_seq
    ):
        raise ContractViolation("base and split configs have different dimensions")
    n_base = sum(1 for n in base.params if n.endswith(".ln1.g"))
    if n_base != config.n_layers:
        raise ContractViolation(f"base has {n_base} blocks, split needs {config.n_layers}")
    T, S = Group.TEXT_BACKBONE, Group.SPEECH_NEW
    m = SplitTransformer(config)
    src = base.tensors()
    m._add("text_embed", _copy(src["embed"]), T)
    m._add("speech_embed", normal_init((config.speech_vocab, config.d_model), INIT_STD, rng), S)
    m._add("pos_embed", _copy(src["pos_embed"]), T)
    for i in range(config.n_shared):
        for t in BLOCK_TENSORS:
            m._add(f"shared.{i}.{t}", _copy(src[f"blocks.{i}.{t}"]), T)
    for branch, group in (("text", T), ("speech", S)):
        for j in range(config.n_branch):
            for t in BLOCK_TENSORS:
                m._add(f"{branch}_branch.{j}.{t}", _copy(src[f"blocks.{config.n_shared + j}.{t}"]), group)
        m._add(f"{branch}_branch.ln_f.g", _copy(src["ln_f.g"]), group)
        m._add(f"{branch}_branch.ln_f.b", _copy(src["ln_f.b"]), group)
    m._add("text_head.w", _copy(src["head.w"]), T)
    m._add("text_head.b", _copy(src["head.b"]), T)
    m._add("speech_head.w", normal_init((config.d_model, config.speech_vocab), INIT_STD, rng), S)
    m._add("speech_head.b", torch.zeros(config.speech_vocab), S)
    return m


def build_nosplit_model(base: TextTransformer, rng: Rng) -> NoSplitTransformer:
    """Merged-vocabulary baseline: base weights plus fresh rows for speech ids."""
    c = base.config
    m = NoSplitTransformer(c)
    src = base.tensors()
    m._add("embed", torch.cat([_copy(src["embed"]), normal_init((c.speech_vocab, c.d_model), INIT_STD, rng)]))
    m._add("head.w", torch.cat([_copy(src["head.w"]), normal_init((c.d_model, c.speech_vocab), INIT_STD, rng)], dim=1))
    m._add("head.b", torch.cat([_copy(src["head.b"]), torch.zeros(c.speech_vocab)]))
    for n, t in src.items():
        if n not in m.params:
            m._add(n, _copy(t))
    return m


# --------------------------------------------------------------------------
# generation


class GenerationMode(str, Enum):
    TEXT_ONLY = "text_only"
    SPEECH_ONLY = "speech_only"
    INTERLEAVED = "interleaved"


# temperatures at or below this sample greedily
GREEDY_TEMPERATURE = 1e-6


def _pick(logits: np.ndarray, temperature: float, top_k: int, rng: Rng) -> int:
    if temperature <= GREEDY_TEMPERATURE:
        return int(np.argmax(logits))
    z = logits / temperature
    if 0 < top_k < len(z):
        order = np.argsort(-z, kind="stable")
        keep = np.zeros(len(z), dtype=bool)
        keep[order[:top_k]] = True
        z = np.where(keep, z, -np.inf)
    z = z - z.max()
    probs = np.exp(z)
    return rng.categorical(probs / probs.sum())


def generate(model: SplitTransformer, prompt: Sequence[Token], mode=GenerationMode.INTERLEAVED,
             max_new: int = 32, temperature: float = 1.0, top_k: int = 0, rng: Rng | None = None) -> list[Token]:
    """Autoregressively extend ``prompt``; returns only the new tokens.

    In interleaved mode the active head starts as the modality of the last
    prompt token and flips each time MODE_SWITCH is emitted.
    """
    mode = GenerationMode(mode)
    if temperature <= 0:
        raise ContractViolation("temperature must be positive")
    if not prompt or prompt[0].id != BOS:
        raise ContractViolation("prompt must start with BOS")
    if rng is None:
        rng = Rng(0)
    active = {
        GenerationMode.TEXT_ONLY: Modality.TEXT,
        GenerationMode.SPEECH_ONLY: Modality.SPEECH,
        GenerationMode.INTERLEAVED: Modality(prompt[-1].modality),
    }[mode]
    seq = [Token(Modality(t.modality), int(t.id)) for t in prompt]
    new = []
    with torch.no_grad():
        for _ in range(max_new):
            if len(seq) >= model.config.max_seq:
                break
            logits = model.head_logits(SequenceBatch.from_sequences([seq]), (active,))[active]
            tok = Token(active, _pick(logits[0, -1].double().numpy(), temperature, top_k, rng))
            seq.append(tok)
            new.append(tok)
            if tok.id == EOS:
                break
            if mode == GenerationMode.INTERLEAVED and tok.id == MODE_SWITCH:
                active = active.other
    return new


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: _Transformer, path) -> None:
    header = json.dumps({"kind": model.kind, "config": model.config.to_dict()},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header)), header]
    for name in sorted(model.params):
        t = model.params[name].value.detach().to(torch.float32).contiguous()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.dim()))
        parts.append(struct.pack(f"<{t.dim()}I", *t.shape))
        parts.append(t.numpy().astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> _Transformer:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported format version {version}")
    pos = 12
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    cls = MODEL_KINDS.get(header["kind"])
    if cls is None:
        raise ContractViolation(f"{path}: unknown model kind {header['kind']!r}")
    model = cls(ModelConfig.from_dict(header["config"]))
    while pos < len(data):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        group = SplitTransformer.group_of(name) if cls is SplitTransformer else Group.TEXT_BACKBONE
        model._add(name, torch.from_numpy(arr.astype(np.float32)), group)
    return model
