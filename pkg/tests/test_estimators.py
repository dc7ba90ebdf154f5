import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modsplit.analysis import analyze
from modsplit.data import CorpusConfig, CorpusSpec, build_corpus
from modsplit.errors import ContractViolation
from modsplit.estimators import LayerSimilarity, SplitSpeechLM
from modsplit.numerics import Rng
from modsplit.schedule import Stage
from modsplit.trainer import make_eval_set
from planted import planted_states


def test_layer_similarity_matches_pipeline():
    states = [planted_states(i, n_layers=5, band=(2, 3)) for i in range(4)]
    est = LayerSimilarity().fit(states)
    reports = analyze(states)
    assert est.lambda_ == reports[0].lam and est.n_layers_ == 5
    np.testing.assert_allclose(est.transform(states), [r.ss for r in reports], rtol=0, atol=1e-12)
    np.testing.assert_allclose(LayerSimilarity().fit_transform(states), est.transform(states), rtol=0, atol=0)


def test_layer_similarity_contracts():
    states = [planted_states(0, n_layers=3, band=(1,))]
    with pytest.raises(NotFittedError):
        LayerSimilarity().transform(states)
    est = LayerSimilarity().fit(states)
    with pytest.raises(ContractViolation):
        est.transform([planted_states(1, n_layers=4, band=(1,))])
    with pytest.raises(ContractViolation):
        LayerSimilarity().fit([])


def test_split_lm_params_and_clone():
    est = SplitSpeechLM(d_model=8, stage2="shared", random_state=3)
    params = est.get_params()
    assert params["d_model"] == 8 and params["stage2"] == "shared" and params["random_state"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(stage2="layerwise").stage2 == "layerwise"


@pytest.fixture(scope="module")
def small_corpus():
    spec = CorpusSpec(text_vocab=20, speech_vocab=32, seed=2)
    return build_corpus(spec, CorpusConfig(n_interleaved=30, n_unsup=10, n_text=30, n_sft=0, min_len=6, max_len=10))


def test_split_lm_fit_score(small_corpus):
    est = SplitSpeechLM(d_model=16, n_heads=2, d_ff=32, n_shared=2, n_branch=1, max_seq=64, batch_size=4,
                        stage0_steps=8, stage1_steps=8, stage2_steps=8, stage2="layerwise",
                        layerwise_k=2, layerwise_w=2)
    with pytest.raises(NotFittedError):
        est.score(None)
    est.fit(small_corpus)
    assert est.stage_ == Stage.STAGE2_LAYERWISE
    ev = make_eval_set(small_corpus.language, 10, Rng(0), prefix_len=4, cont_len=2, n_probes=4, probe_len=8)
    acc = est.score(ev)
    assert 0.0 <= acc <= 1.0
    res = est.evaluate(ev)
    assert set(res) == {"text", "speech", "ppl_base", "ppl"}
    # layerwise unfreezing trains the shared trunk only; the text branch stays the base's top block
    m, base = est.model_.params, est.base_.params
    assert np.array_equal(m["text_embed"].value.detach().numpy(), base["embed"].value.detach().numpy())
    for name, p in m.items():
        if name.startswith("text_branch.0."):
            src = base[name.replace("text_branch.0.", "blocks.2.")]
            assert np.array_equal(p.value.detach().numpy(), src.value.detach().numpy()), name

def test_split_lm_rejects_bad_input(small_corpus):
    with pytest.raises(ContractViolation):
        SplitSpeechLM().fit([1, 2, 3])
    with pytest.raises(ContractViolation):
        SplitSpeechLM(stage2="sideways").fit(small_corpus)
