"""Command-line entry point.

Every subcommand writes only under ``--out``: the resolved ``config.json``
first, then its outputs, then ``manifest.json`` listing each file and its
byte length. Exit codes: 0 ok, 1 contract/config violation, 2 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import config as C
from .analysis import analyze, collect_states, emit
from .data import (
    SyntheticLanguage,
    build_corpus,
    filter_corpus,
    load_corpus,
    load_language,
    sample_paired,
    save_corpus,
    save_language,
)
from .errors import ContractViolation, TrainingDiverged
from .model import (
    SplitTransformer,
    TextTransformer,
    build_split_model,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import Rng, set_threads
from .schedule import Stage
from .trainer import (
    ABLATION_CONFIGS,
    AblationContext,
    MetricsLog,
    RecordStream,
    eval_preservation,
    eval_ranked,
    make_eval_set,
    pretrain_text_base,
    run_ablation,
    run_stage,
    stage_plan,
    text_perplexity,
    write_ablation,
)

log = logging.getLogger("modsplit")

CORPUS_FILES = ("interleaved.jsonl", "unsup.jsonl", "text.jsonl", "sft.jsonl")

# derived-seed stream ids, one per consumer
SEED_BASE, SEED_SPLIT, SEED_STREAM, SEED_TEXT, SEED_EVAL, SEED_ANALYSIS = range(1, 7)


class Run:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.seed = int(cfg["seed"])

    def path(self, name) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rng(self, stream: int) -> Rng:
        return Rng(self.seed ^ (stream << 32))

    def data_dir(self) -> Path:
        d = Path(C.require(self.cfg, "paths.data"))
        for name in ("language.json",) + CORPUS_FILES:
            if not (d / name).is_file():
                raise FileNotFoundError(f"corpus file not found: {d / name}")
        return d

    def language(self) -> SyntheticLanguage:
        lang = load_language(self.data_dir() / "language.json")
        m = self.cfg["model"]
        have = (lang.spec.text_vocab, lang.spec.speech_vocab)
        if have != (m["text_vocab"], m["speech_vocab"]):
            raise ContractViolation(f"corpus vocab sizes {have} do not match model.text_vocab/speech_vocab "
                                    f"{(m['text_vocab'], m['speech_vocab'])}")
        return lang

    def corpus(self, name):
        self.language()
        return load_corpus(self.data_dir() / name)

    def checkpoint(self, key, kind=None):
        path = Path(C.require(self.cfg, key))
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model = load_checkpoint(path)
        if model.config != C.model_config(self.cfg):
            raise ContractViolation(f"checkpoint {path} was built with a different model config")
        if kind is not None and not isinstance(model, kind):
            raise ContractViolation(f"checkpoint {path} holds a {model.kind} model, expected {kind.kind}")
        return model

    def evalset(self, lang):
        e = self.cfg["eval"]
        return make_eval_set(lang, e["n_items"], self.rng(SEED_EVAL), prefix_len=e["prefix_len"],
                             cont_len=e["cont_len"], n_probes=e["n_probes"], probe_len=e["probe_len"])

    def write_json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def manifest(self):
        files = sorted(p for p in self.out.rglob("*") if p.is_file() and p.name != "manifest.json")
        entries = [{"path": p.relative_to(self.out).as_posix(), "bytes": p.stat().st_size} for p in files]
        self.write_json("manifest.json", {"files": entries})


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run):
    corpus = build_corpus(C.corpus_spec(run.cfg), C.corpus_config(run.cfg))
    save_language(corpus.language, run.path("language.json"))
    for name, recs in zip(CORPUS_FILES, (corpus.interleaved, corpus.unsup, corpus.text, corpus.sft)):
        save_corpus(recs, run.path(name))
    with open(run.path("asr.jsonl"), "w") as f:
        for rec, pair in zip(corpus.sft, corpus.sft_pairs):
            if pair.reference:
                f.write(json.dumps({"id": rec.id, "ref": pair.reference, "hyp": pair.transcript},
                                   separators=(",", ":")) + "\n")
    return (f"wrote {len(corpus.interleaved)} interleaved, {len(corpus.unsup)} unsupervised, "
            f"{len(corpus.text)} text and {len(corpus.sft)} SFT records")


def cmd_filter(run: Run):
    d = run.data_dir()
    records = load_corpus(d / "sft.jsonl")
    asr_path = d / "asr.jsonl"
    if not asr_path.is_file():
        raise FileNotFoundError(f"ASR transcript file not found: {asr_path}")
    asr = {}
    for line in asr_path.read_text().splitlines():
        if line.strip():
            item = json.loads(line)
            asr[item["id"]] = (item["ref"], item["hyp"])
    res = filter_corpus(((rid, *asr[rid]) for rid in sorted(asr)), run.cfg["filter"]["threshold"])
    dropped = {rid for rid, _ in res.rejected} | {rid for rid, _ in res.errors}
    kept = [r for r in records if r.id not in dropped]
    save_corpus(kept, run.path("sft.filtered.jsonl"))
    res.write_log(run.path("rejections.csv"))
    return f"kept {len(kept)} of {len(records)} SFT records ({len(res.rejected)} rejected at WER >= threshold)"


def cmd_pretrain_base(run: Run):
    text = run.corpus("text.jsonl")
    tc = C.train_config(run.cfg)
    metrics = MetricsLog(run.path("metrics.csv"))
    base = pretrain_text_base(C.model_config(run.cfg), text, tc, run.rng(SEED_BASE), metrics)
    save_checkpoint(base, run.path("base.ckpt"))
    return f"base model trained for {tc.stage0_steps} steps -> base.ckpt"


def cmd_build_split(run: Run):
    base = run.checkpoint("paths.base", TextTransformer)
    model = build_split_model(base, run.rng(SEED_SPLIT))
    save_checkpoint(model, run.path("split.ckpt"))
    return "split model -> split.ckpt"


def _streams(run: Run):
    speech = run.corpus("interleaved.jsonl") + run.corpus("unsup.jsonl")
    text = run.corpus("text.jsonl")
    return (RecordStream(speech, run.rng(SEED_STREAM), "speech"),
            RecordStream(text, run.rng(SEED_TEXT), "text"))


def cmd_train(run: Run):
    stage = Stage(run.cfg["train"]["stage"])
    if stage == Stage.SFT:
        raise ContractViolation("use the sft subcommand for supervised fine-tuning")
    speech, text = _streams(run)
    model = run.checkpoint("paths.model")
    tc = C.train_config(run.cfg)
    layerwise = C.layerwise_params(run.cfg) if stage == Stage.STAGE2_LAYERWISE else None
    plan = stage_plan(stage, tc, layerwise)
    steps = tc.stage1_steps if stage == Stage.STAGE1 else tc.stage2_steps
    run_stage(model, plan, steps, speech, tc, text=None if stage == Stage.STAGE1 else text,
              metrics=MetricsLog(run.path("metrics.csv")))
    save_checkpoint(model, run.path("model.ckpt"))
    return f"{stage.value}: {steps} steps -> model.ckpt"


def cmd_sft(run: Run):
    d = run.data_dir()
    run.language()
    name = "sft.filtered.jsonl" if (d / "sft.filtered.jsonl").is_file() else "sft.jsonl"
    records = load_corpus(d / name)
    model = run.checkpoint("paths.model", SplitTransformer)
    tc = C.train_config(run.cfg)
    run_stage(model, stage_plan(Stage.SFT, tc), tc.sft_steps, RecordStream(records, run.rng(SEED_STREAM), "sft"),
              tc, metrics=MetricsLog(run.path("metrics.csv")))
    save_checkpoint(model, run.path("model.ckpt"))
    return f"sft on {name}: {tc.sft_steps} steps -> model.ckpt"


def cmd_eval(run: Run):
    lang = run.language()
    model = run.checkpoint("paths.model")
    es = run.evalset(lang)
    result = {"accuracy": eval_ranked(model, es), "text_perplexity": text_perplexity(model, es.probes)}
    if run.cfg["paths"]["base"]:
        base = run.checkpoint("paths.base", TextTransformer)
        p = eval_preservation(model, base, es.probes)
        result["preservation"] = {"max_abs_logit_diff": p.max_abs_logit_diff,
                                  "ppl_model": p.ppl_model, "ppl_base": p.ppl_base}
    run.write_json("eval.json", result)
    return json.dumps(result, sort_keys=True)


def cmd_analyze(run: Run):
    lang = run.language()
    clean = SyntheticLanguage(replace(lang.spec, noise_prob=0.0), lang.transition, lang.codebook)
    model = run.checkpoint("paths.model", SplitTransformer)
    a = run.cfg["analysis"]
    rng = run.rng(SEED_ANALYSIS)
    states = []
    for sid in range(a["n_samples"]):
        s = sample_paired(clean, a["length"], rng)
        states.append(collect_states(model, s.text, s.speech, s.pairs, sid))
    reports = analyze(states)
    emit(reports, run.out / "analysis")
    return f"lambda={reports[0].lam:.6g}; SS curves for {len(reports)} samples under analysis/"


def cmd_ablate(run: Run):
    names = run.args.configs.split(",") if run.args.configs else run.cfg["ablation"]["configs"].split(",")
    names = [n.strip() for n in names if n.strip()]
    bad = [n for n in names if n not in ABLATION_CONFIGS]
    if bad:
        raise ContractViolation(f"unknown ablation configs {bad}; choose from {list(ABLATION_CONFIGS)}")
    lang = run.language()
    speech = run.corpus("interleaved.jsonl") + run.corpus("unsup.jsonl")
    text = run.corpus("text.jsonl")
    tc = C.train_config(run.cfg)
    if run.cfg["paths"]["base"]:
        base = run.checkpoint("paths.base", TextTransformer)
    else:
        base = pretrain_text_base(C.model_config(run.cfg), text, tc, run.rng(SEED_BASE),
                                  MetricsLog(run.path("metrics_base.csv")))
        save_checkpoint(base, run.path("base.ckpt"))
    ctx = AblationContext(base, speech, text, run.evalset(lang), tc, C.layerwise_params(run.cfg),
                          seed=run.seed, metrics_dir=run.out)
    rows = run_ablation(names, ctx)
    return write_ablation(rows, run.path("ablation.csv"), run.path("ablation.txt"))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-base": cmd_pretrain_base,
    "build-split": cmd_build_split,
    "train": cmd_train,
    "sft": cmd_sft,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
    "filter": cmd_filter,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", required=True, help="run directory; all outputs go here")
    common.add_argument("--seed", type=int)
    common.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                        help="override a dotted config key (repeatable)")
    common.add_argument("--threads", type=int)
    common.add_argument("--preset", choices=["default", "quick"], default="default")
    parser = argparse.ArgumentParser(prog="modsplit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("--configs", help="comma-separated subset of " + ",".join(ABLATION_CONFIGS))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        preset = C.QUICK if args.preset == "quick" else None
        cfg = C.resolve(args.config, args.sets, args.seed, args.threads, preset)
        run = Run(args, cfg)
        run.out.mkdir(parents=True, exist_ok=True)
        run.path("config.json").write_text(C.dumps(cfg))
        set_threads(cfg["threads"])
        t0 = time.perf_counter()
        summary = COMMANDS[args.command](run)
        run.write_json("run.json", {"command": args.command, "seed": run.seed, "threads": cfg["threads"]})
        run.manifest()
    except (ContractViolation, TrainingDiverged, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    print(summary)
    print(f"[{args.command}] done in {time.perf_counter() - t0:.1f}s; outputs in {run.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
