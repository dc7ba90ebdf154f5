"""Staged training, ranked-continuation evaluation and the pretraining ablation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import InterleavedRecord, SyntheticLanguage
from .errors import ContractViolation, NoSupervisedPositions, TrainingDiverged
from .model import (
    BOS,
    Modality,
    ModelConfig,
    SequenceBatch,
    SplitTransformer,
    TextTransformer,
    Token,
    build_nosplit_model,
    build_split_model,
)
from .numerics import Rng, adamw_step, backward
from .schedule import CosineScheduleParams, FreezePlan, LayerwiseScheduleParams, Stage, apply_plan

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 32
    seq_len: int = 256
    stage0_steps: int = 3000
    stage1_steps: int = 2000
    stage2_steps: int = 4000
    sft_steps: int = 1000
    base_lr: float = 1e-3
    base_lr_end: float = 1e-4
    stage1_lr: float = 4e-4
    stage1_lr_end: float = 4e-5
    stage2_lr: float = 6e-5
    stage2_lr_end: float = 6e-6
    sft_lr: float = 1e-5
    sft_lr_end: float = 1e-6
    warmup_frac: float = 0.01
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    text_mix: float = 0.1


def stage_plan(stage: Stage, cfg: TrainConfig, layerwise: LayerwiseScheduleParams | None = None,
               steps: int | None = None) -> FreezePlan:
    """Default lr schedule for each stage at the configured budget."""
    table = {
        Stage.STAGE1: (cfg.stage1_lr, cfg.stage1_lr_end, cfg.stage1_steps),
        Stage.STAGE2_FULL: (cfg.stage2_lr, cfg.stage2_lr_end, cfg.stage2_steps),
        Stage.STAGE2_SHARED: (cfg.stage2_lr, cfg.stage2_lr_end, cfg.stage2_steps),
        Stage.STAGE2_LAYERWISE: (cfg.stage2_lr, cfg.stage2_lr_end, cfg.stage2_steps),
        Stage.NF: (cfg.stage2_lr, cfg.stage2_lr_end, cfg.stage2_steps),
        Stage.SFT: (cfg.sft_lr, cfg.sft_lr_end, cfg.sft_steps),
    }
    hi, lo, total = table[stage]
    total = steps or total
    return FreezePlan(stage, CosineScheduleParams.with_warmup_fraction(hi, lo, total, cfg.warmup_frac), layerwise)


# --------------------------------------------------------------------------
# batching


class RecordStream:
    """Endless shuffled pass over a record list; reshuffles at each epoch boundary."""

    def __init__(self, records, rng: Rng, name: str = "records"):
        if not records:
            raise ContractViolation(f"{name}: empty corpus")
        self.records = list(records)
        self.rng = rng
        self.name = name
        self.epoch = 0
        self._order: list[int] = []

    def take(self, n: int) -> list[InterleavedRecord]:
        out = []
        while len(out) < n:
            if not self._order:
                if out or self.epoch:
                    log.info("%s: epoch %d complete, reshuffling", self.name, self.epoch)
                order = list(range(len(self.records)))
                self.rng.derive(self.epoch).shuffle(order)
                self.epoch += 1
                self._order = order[::-1]
            out.append(self.records[self._order.pop()])
        return out


def records_batch(records, seq_len: int) -> SequenceBatch:
    seqs, sup = [], []
    for r in records:
        toks = r.tokens()[:seq_len]
        flags = r.supervision()[:seq_len]
        flags[-1] = False
        seqs.append(toks)
        sup.append(flags)
    return SequenceBatch.from_sequences(seqs, sup)


def is_text_step(step: int, ratio: float) -> bool:
    """Exactly ``ratio`` of steps, evenly spread, draw text-only batches."""
    return ratio > 0 and math.floor((step + 1) * ratio) > math.floor(step * ratio)


# --------------------------------------------------------------------------
# stage runner


class MetricsLog:
    HEADER = ["step", "group", "lr", "loss_text", "loss_speech"]

    def __init__(self, path=None):
        self.rows: list[list] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.HEADER)

    def append(self, step, groups: dict, stats: dict) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        new = [[step, g, fmt(lr), fmt(stats.get("loss_text")), fmt(stats.get("loss_speech"))]
               for g, lr in groups.items()]
        self.rows.extend(new)
        if self.path:
            with open(self.path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerows(new)


def reset_optimizer(model) -> None:
    for p in model.parameters():
        p.exp_avg = p.exp_avg_sq = None
        p.step = 0


def run_stage(model, plan: FreezePlan, steps: int, primary: RecordStream, cfg: TrainConfig,
              text: RecordStream | None = None, metrics: MetricsLog | None = None,
              step_offset: int = 0) -> MetricsLog:
    """Train ``model`` in place for ``steps`` optimizer steps under ``plan``.

    Each step draws a batch from ``primary`` or, on the evenly spread
    ``cfg.text_mix`` fraction of steps, from ``text``. The lr for every tensor
    comes from ``apply_plan`` at the stage-local step.
    """
    metrics = metrics or MetricsLog()
    reset_optimizer(model)
    mix = cfg.text_mix if text is not None else 0.0
    for s in range(steps):
        state = apply_plan(model, plan, s)
        stream = text if is_text_step(s, mix) else primary
        batch = records_batch(stream.take(cfg.batch_size), cfg.seq_len)
        model.zero_grad()
        try:
            loss, stats = model.loss(batch)
        except NoSupervisedPositions:
            continue
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step_offset + s}")
        if loss.requires_grad:
            backward(loss)
            adamw_step(model.parameters(), state.lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
        metrics.append(step_offset + s, state.groups(), stats)
    model.zero_grad()
    return metrics


def pretrain_text_base(config: ModelConfig, text_records, cfg: TrainConfig, rng: Rng,
                       metrics: MetricsLog | None = None) -> TextTransformer:
    """Train the plain (n_shared + n_branch)-block text LM that plays the pretrained backbone."""
    for r in text_records[:1]:
        if any(c.modality != Modality.TEXT for c in r.chunks):
            raise ContractViolation("base pretraining needs a text-only corpus")
    model = TextTransformer(config, rng.derive(0))
    plan = FreezePlan(Stage.NF, CosineScheduleParams.with_warmup_fraction(
        cfg.base_lr, cfg.base_lr_end, cfg.stage0_steps, cfg.warmup_frac))
    run_stage(model, plan, cfg.stage0_steps, RecordStream(text_records, rng.derive(1), "text"),
              replace(cfg, text_mix=0.0), metrics=metrics)
    return model


# --------------------------------------------------------------------------
# evaluation


@dataclass
class RankedItem:
    prefix: list
    true: list
    distractor: list
    modality: Modality


@dataclass
class EvalSet:
    items: list = field(default_factory=list)
    probes: list = field(default_factory=list)  # text-only token sequences


def _distractor_text(lang: SyntheticLanguage, prefix, cont, rng: Rng, match_lengths: bool) -> list[int]:
    """Resample the final half of ``cont`` from the chain started at a wrong state."""
    h = max(1, len(cont) // 2)
    keep = list(cont[: len(cont) - h])
    prev_true = (prefix + keep)[-1]
    ids = np.arange(lang.spec.text_vocab)
    for _ in range(20):
        state = prev_true
        while state == prev_true:
            state = rng.randint(lang.content_ids.start, lang.content_ids.stop - 1)
        out = list(keep)
        for t in cont[len(keep):]:
            allowed = None
            if match_lengths:
                L = len(lang.codebook[t])
                allowed = np.array([len(lang.codebook[i]) == L for i in ids[3:]], dtype=float)
            state = lang.next_id(state, rng, allowed)
            out.append(state)
        if out != list(cont):
            return out
    # chain too peaked to move away from the truth: perturb the last token directly
    L = len(lang.codebook[cont[-1]])
    alts = [i for i in lang.content_ids if i != cont[-1] and (not match_lengths or len(lang.codebook[i]) == L)]
    out[-1] = alts[rng.randint(0, len(alts) - 1)]
    return out


def make_eval_set(lang: SyntheticLanguage, n_items: int, rng: Rng, modalities=(Modality.TEXT, Modality.SPEECH),
                  prefix_len: int = 8, cont_len: int = 4, n_probes: int = 100, probe_len: int = 24) -> EvalSet:
    es = EvalSet()
    for m in modalities:
        for _ in range(n_items):
            words = lang.sample_text(prefix_len + cont_len, rng)
            prefix, cont = words[:prefix_len], words[prefix_len:]
            wrong = _distractor_text(lang, prefix, cont, rng, match_lengths=m == Modality.SPEECH)
            if m == Modality.SPEECH:
                render = lang.expand
            else:
                def render(x):
                    return list(x)
            es.items.append(RankedItem(
                [Token(m, BOS)] + [Token(m, i) for i in render(prefix)],
                [Token(m, i) for i in render(cont)],
                [Token(m, i) for i in render(wrong)],
                m,
            ))
    for _ in range(n_probes):
        es.probes.append([Token(Modality.TEXT, BOS)] + [Token(Modality.TEXT, i) for i in lang.sample_text(probe_len, rng)])
    return es


def continuation_scores(model, items, batch_size: int = 64) -> np.ndarray:
    """Mean per-token log-prob of (true, distractor) continuations, shape (n, 2)."""
    out = np.zeros((len(items), 2))
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        seqs = []
        for it in chunk:
            seqs.append(it.prefix + it.true)
            seqs.append(it.prefix + it.distractor)
        lp = model.next_token_logprobs(SequenceBatch.from_sequences(seqs)).numpy()
        for k, it in enumerate(chunk):
            p = len(it.prefix)
            for j, cont in enumerate((it.true, it.distractor)):
                row = lp[2 * k + j]
                out[start + k, j] = row[p - 1:p - 1 + len(cont)].mean()
    return out


def ranked_accuracy(scores: np.ndarray) -> float:
    wins = np.where(scores[:, 0] > scores[:, 1], 1.0, np.where(scores[:, 0] == scores[:, 1], 0.5, 0.0))
    return float(wins.mean())


def eval_ranked(model, evalset: EvalSet) -> dict:
    """Accuracy per modality: true continuation must out-score the distractor."""
    by_mod: dict = {}
    for it in evalset.items:
        if len(it.true) != len(it.distractor) or not it.true:
            log.warning("skipping ranked item with mismatched continuation lengths")
            continue
        if isinstance(model, TextTransformer) and it.modality == Modality.SPEECH:
            continue
        by_mod.setdefault(it.modality, []).append(it)
    return {m.name.lower(): ranked_accuracy(continuation_scores(model, items)) for m, items in by_mod.items()}


def text_perplexity(model, probes) -> float:
    batch = SequenceBatch.from_sequences(probes)
    lp = model.next_token_logprobs(batch)
    mask = batch.target_mod == Modality.TEXT
    return float(math.exp(-lp[mask].mean()))


@dataclass
class Preservation:
    max_abs_logit_diff: float
    ppl_model: float
    ppl_base: float


def eval_preservation(model, base: TextTransformer, probes) -> Preservation:
    mc, bc = model.config, base.config
    if (mc.d_model, mc.text_vocab, mc.n_layers, mc.max_seq) != (bc.d_model, bc.text_vocab, bc.n_layers, bc.max_seq):
        raise ContractViolation("model and base configs are not from the same family")
    batch = SequenceBatch.from_sequences(probes)
    with torch.no_grad():
        a = model.text_logits(batch)[..., : bc.text_vocab]
        b = base.text_logits(batch)
    valid = torch.zeros(batch.ids.shape, dtype=torch.bool)
    for i, n in enumerate(batch.lengths):
        valid[i, :n] = True
    diff = float((a - b).abs()[valid].max())
    return Preservation(diff, text_perplexity(model, probes), text_perplexity(base, probes))


# --------------------------------------------------------------------------
# ablation


ABLATION_CONFIGS = ("fp-full", "fp-layerwise", "fp-shared", "nf", "nf-nosplit")
_FP_STAGE = {
    "fp-full": Stage.STAGE2_FULL,
    "fp-layerwise": Stage.STAGE2_LAYERWISE,
    "fp-shared": Stage.STAGE2_SHARED,
}


@dataclass
class AblationRow:
    config: str
    speech_acc: float = float("nan")
    text_acc: float = float("nan")
    ppl_base: float = float("nan")
    ppl_stage1: float = float("nan")
    delta_stage1: float = float("nan")
    ppl_final: float = float("nan")
    delta_final: float = float("nan")
    status: str = "ok"

    FIELDS = ("config", "speech_acc", "text_acc", "ppl_base", "ppl_stage1", "delta_stage1",
              "ppl_final", "delta_final", "status")

    def values(self):
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class AblationContext:
    base: TextTransformer
    speech: list
    text: list
    evalset: EvalSet
    cfg: TrainConfig
    layerwise: LayerwiseScheduleParams
    seed: int = 0
    metrics_dir: Path | None = None
    models: dict = field(default_factory=dict)
    # training wall time per config (FP rows exclude the shared Stage 1); not part of the table
    seconds: dict = field(default_factory=dict)


def _metrics(ctx, name):
    return MetricsLog(ctx.metrics_dir / f"metrics_{name}.csv") if ctx.metrics_dir else MetricsLog()


def run_ablation(configs, ctx: AblationContext) -> list[AblationRow]:
    """Train and evaluate each pretraining strategy from the same base and data.

    FP rows share one Stage-1 run; NF rows train everything from the start with
    the same two-phase budget and data (speech only, then with text mixed in).
    """
    cfg = ctx.cfg
    root = Rng(ctx.seed)
    split_rng_seed = root.next_u64()
    ppl_base = text_perplexity(ctx.base, ctx.evalset.probes)
    rows = []
    fp_stage1 = None

    def streams(tag):
        r = Rng(ctx.seed ^ tag)
        return RecordStream(ctx.speech, r.derive(0), "speech"), RecordStream(ctx.text, r.derive(1), "text")

    for name in configs:
        row = AblationRow(name, ppl_base=ppl_base)
        try:
            if name in _FP_STAGE:
                if fp_stage1 is None:
                    t0 = time.perf_counter()
                    fp_stage1 = build_split_model(ctx.base, Rng(split_rng_seed))
                    sp, _ = streams(1)
                    run_stage(fp_stage1, stage_plan(Stage.STAGE1, cfg), cfg.stage1_steps, sp, cfg,
                              metrics=_metrics(ctx, "fp-stage1"))
                    ctx.models["fp-stage1"] = fp_stage1
                    ctx.seconds["fp-stage1"] = time.perf_counter() - t0
                t0 = time.perf_counter()
                after1 = fp_stage1
                model = fp_stage1.clone()
                stage = _FP_STAGE[name]
                sp, tx = streams(2)
                run_stage(model, stage_plan(stage, cfg, ctx.layerwise if stage == Stage.STAGE2_LAYERWISE else None),
                          cfg.stage2_steps, sp, cfg, text=tx, metrics=_metrics(ctx, name),
                          step_offset=cfg.stage1_steps)
            elif name in ("nf", "nf-nosplit"):
                t0 = time.perf_counter()
                if name == "nf":
                    model = build_split_model(ctx.base, Rng(split_rng_seed))
                else:
                    model = build_nosplit_model(ctx.base, Rng(split_rng_seed))
                m = _metrics(ctx, name)
                sp, _ = streams(1)
                phase1 = FreezePlan(Stage.NF, stage_plan(Stage.STAGE1, cfg).cosine)
                run_stage(model, phase1, cfg.stage1_steps, sp, cfg, metrics=m)
                after1 = model.clone()
                sp, tx = streams(2)
                run_stage(model, stage_plan(Stage.NF, cfg), cfg.stage2_steps, sp, cfg, text=tx, metrics=m,
                          step_offset=cfg.stage1_steps)
            else:
                raise ContractViolation(f"unknown ablation config {name!r}")
            ctx.models[name] = model
            ctx.seconds[name] = time.perf_counter() - t0
            acc = eval_ranked(model, ctx.evalset)
            row.speech_acc = acc.get("speech", float("nan"))
            row.text_acc = acc.get("text", float("nan"))
            row.ppl_stage1 = text_perplexity(after1, ctx.evalset.probes)
            row.delta_stage1 = row.ppl_stage1 - ppl_base
            row.ppl_final = text_perplexity(model, ctx.evalset.probes)
            row.delta_final = row.ppl_final - ppl_base
        except Exception as exc:  # keep the partial table
            log.exception("ablation config %s failed", name)
            row.status = f"failed: {exc}"
        rows.append(row)
    return rows


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def write_ablation(rows, csv_path=None, txt_path=None) -> str:
    table = [list(AblationRow.FIELDS)] + [[_fmt(v) for v in r.values()] for r in rows]
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerows(table)
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table) + "\n"
    if txt_path:
        Path(txt_path).write_text(text)
    return text
