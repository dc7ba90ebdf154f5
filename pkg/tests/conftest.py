import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from modsplit.data import CorpusConfig, CorpusSpec, build_corpus  # noqa: E402
from modsplit.model import ModelConfig, TextTransformer, build_split_model  # noqa: E402
from modsplit.numerics import Rng, set_threads  # noqa: E402
from modsplit.trainer import TrainConfig  # noqa: E402

set_threads(1)

TINY = ModelConfig(d_model=16, n_heads=2, d_ff=32, n_shared=3, n_branch=1, text_vocab=24, speech_vocab=40, max_seq=64)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_base():
    return TextTransformer(TINY, Rng(11))


@pytest.fixture
def tiny_split(tiny_base):
    return build_split_model(tiny_base, Rng(12))


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = CorpusSpec(text_vocab=TINY.text_vocab, speech_vocab=TINY.speech_vocab, seed=5)
    return build_corpus(spec, CorpusConfig(n_interleaved=60, n_unsup=20, n_text=60, n_sft=40,
                                           min_len=4, max_len=8, min_chunk=2, max_chunk=4,
                                           sft_question_len=3, sft_answer_len=3))


@pytest.fixture
def tiny_train():
    return TrainConfig(batch_size=4, seq_len=64, stage0_steps=20, stage1_steps=12, stage2_steps=12, sft_steps=6,
                       base_lr=3e-3, base_lr_end=3e-4, stage1_lr=3e-3, stage1_lr_end=3e-4,
                       stage2_lr=1e-3, stage2_lr_end=1e-4)


def bytes_of(t: torch.Tensor) -> bytes:
    return t.detach().contiguous().numpy().tobytes()


# one line per acceptance criterion, filled by test_acceptance and echoed at the end of the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
