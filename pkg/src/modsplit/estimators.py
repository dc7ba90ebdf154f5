"""scikit-learn style facades over the training pipeline and the similarity analysis.

``SplitSpeechLM`` bundles base pretraining, the split, Stage 1 and one Stage-2
variant behind ``fit``/``score``. ``LayerSimilarity`` learns the normalizer
λ from a set of samples and maps samples to per-layer similarity curves.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import LayerStates, analyze_sample
from .data import Corpus
from .errors import ContractViolation
from .model import ModelConfig, build_split_model
from .numerics import Rng
from .schedule import LayerwiseScheduleParams, Stage
from .trainer import (
    EvalSet,
    RecordStream,
    TrainConfig,
    eval_ranked,
    pretrain_text_base,
    run_stage,
    stage_plan,
    text_perplexity,
)

_STAGE2 = {"full": Stage.STAGE2_FULL, "shared": Stage.STAGE2_SHARED, "layerwise": Stage.STAGE2_LAYERWISE}


class SplitSpeechLM(BaseEstimator):
    """Text base -> split model -> frozen speech pretraining -> partial unfreezing."""

    def __init__(self, d_model=48, n_heads=4, d_ff=192, n_shared=4, n_branch=2, max_seq=128,
                 batch_size=16, stage0_steps=1500, stage1_steps=2000, stage2_steps=1000,
                 base_lr=3e-3, stage1_lr=3e-3, stage2_lr=1e-3, stage2="full",
                 layerwise_k=100, layerwise_w=50, text_mix=0.1, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.n_shared = n_shared
        self.n_branch = n_branch
        self.max_seq = max_seq
        self.batch_size = batch_size
        self.stage0_steps = stage0_steps
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.base_lr = base_lr
        self.stage1_lr = stage1_lr
        self.stage2_lr = stage2_lr
        self.stage2 = stage2
        self.layerwise_k = layerwise_k
        self.layerwise_w = layerwise_w
        self.text_mix = text_mix
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, seq_len=self.max_seq,
            stage0_steps=self.stage0_steps, stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps,
            base_lr=self.base_lr, base_lr_end=self.base_lr / 10,
            stage1_lr=self.stage1_lr, stage1_lr_end=self.stage1_lr / 10,
            stage2_lr=self.stage2_lr, stage2_lr_end=self.stage2_lr / 10,
            text_mix=self.text_mix,
        )

    def fit(self, X: Corpus, y=None):
        if not isinstance(X, Corpus):
            raise ContractViolation("SplitSpeechLM.fit expects a Corpus from build_corpus")
        if self.stage2 not in _STAGE2:
            raise ContractViolation(f"stage2 must be one of {sorted(_STAGE2)}, got {self.stage2!r}")
        spec = X.language.spec
        config = ModelConfig(self.d_model, self.n_heads, self.d_ff, self.n_shared, self.n_branch,
                             spec.text_vocab, spec.speech_vocab, self.max_seq)
        cfg = self._train_config()
        root = Rng(self.random_state)
        self.base_ = pretrain_text_base(config, X.text, cfg, root.derive(0))
        model = build_split_model(self.base_, root.derive(1))
        speech = X.interleaved + X.unsup
        run_stage(model, stage_plan(Stage.STAGE1, cfg), cfg.stage1_steps,
                  RecordStream(speech, root.derive(2), "speech"), cfg)
        layerwise = None
        if self.stage2 == "layerwise":
            layerwise = LayerwiseScheduleParams(self.n_shared, self.layerwise_k, self.layerwise_w,
                                                self.stage2_steps, self.stage2_lr)
        self.stage_ = _STAGE2[self.stage2]
        run_stage(model, stage_plan(self.stage_, cfg, layerwise), cfg.stage2_steps,
                  RecordStream(speech, root.derive(3), "speech"), cfg,
                  text=RecordStream(X.text, root.derive(4), "text"))
        self.model_ = model
        return self

    def score(self, X: EvalSet, y=None) -> float:
        """Speech ranked-continuation accuracy."""
        check_is_fitted(self, "model_")
        return eval_ranked(self.model_, X)["speech"]

    def evaluate(self, X: EvalSet) -> dict:
        check_is_fitted(self, "model_")
        out = dict(eval_ranked(self.model_, X))
        out["ppl_base"] = text_perplexity(self.base_, X.probes)
        out["ppl"] = text_perplexity(self.model_, X.probes)
        return out


class LayerSimilarity(TransformerMixin, BaseEstimator):
    """``fit`` learns λ (mean DTW score over every layer, pair and sample);
    ``transform`` returns one SS curve per sample, shape (n_samples, n_layers)."""

    def fit(self, X, y=None):
        reports = self._reports(X)
        values = [d for r in reports for layer in r.dtw for d in layer]
        self.lambda_ = float(np.mean(values))
        self.n_layers_ = len(reports[0].dtw)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "lambda_")
        reports = self._reports(X)
        if any(len(r.dtw) != self.n_layers_ for r in reports):
            raise ContractViolation(f"expected {self.n_layers_} layers per sample")
        lam = self.lambda_
        return np.array([[sum(d / (b + lam) for d, b in zip(ld, lb)) for ld, lb in zip(r.dtw, r.bg)]
                         for r in reports])

    @staticmethod
    def _reports(X):
        X = list(X)
        if not X or not all(isinstance(s, LayerStates) for s in X):
            raise ContractViolation("expected a nonempty sequence of LayerStates")
        return [analyze_sample(s) for s in X]
