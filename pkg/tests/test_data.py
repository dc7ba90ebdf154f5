import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modsplit.data import (
    AlignmentPair,
    Chunk,
    CorpusConfig,
    CorpusSpec,
    InterleavedRecord,
    RecordKind,
    SftConfig,
    build_corpus,
    build_sft,
    chunk_interleave,
    filter_corpus,
    gen_language,
    load_corpus,
    record_to_json,
    recover_text,
    sample_paired,
    save_corpus,
    unsupervised_record,
    wer,
)
from modsplit.errors import ContractViolation, CorpusFormatError
from modsplit.model import BOS, EOS, MODE_SWITCH, Modality
from modsplit.numerics import Rng
from oracles import edit_distance

SPEC = CorpusSpec(text_vocab=32, speech_vocab=64, seed=1)


@pytest.fixture(scope="module")
def lang():
    return gen_language(SPEC, Rng(SPEC.seed))


@pytest.fixture(scope="module")
def noisy_lang(lang):
    from dataclasses import replace

    from modsplit.data import SyntheticLanguage

    return SyntheticLanguage(replace(lang.spec, noise_prob=0.1), lang.transition, lang.codebook)


# -- language ------------------------------------------------------------------


def test_rows_stochastic_and_codebook_valid(lang):
    assert np.all(np.abs(lang.transition.sum(axis=1) - 1) <= 1e-9)
    assert set(lang.codebook) == set(range(3, SPEC.text_vocab))
    for cw in lang.codebook.values():
        assert 2 <= len(cw) <= 4 and all(3 <= s < SPEC.speech_vocab for s in cw)
    words = list(lang.codebook.values())
    for a in words:
        for b in words:
            assert a == b or b[: len(a)] != a  # prefix-free


def test_low_temperature_rows_one_hot():
    from dataclasses import replace

    cold = gen_language(replace(SPEC, temperature=1e-4), Rng(3))
    assert np.all(cold.transition.max(axis=1) > 1 - 1e-9)


def test_language_deterministic():
    a = gen_language(SPEC, Rng(7))
    b = gen_language(SPEC, Rng(7))
    assert a.transition.tobytes() == b.transition.tobytes() and a.codebook == b.codebook


@pytest.mark.parametrize("kw", [dict(temperature=0.0), dict(temperature=-1.0), dict(noise_prob=1.0), dict(markov_order=2)])
def test_bad_spec(kw):
    from dataclasses import replace

    with pytest.raises(ContractViolation):
        gen_language(replace(SPEC, **kw), Rng(0))


# -- paired samples ------------------------------------------------------------


@given(st.integers(1, 40), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_noiseless_round_trip(n, seed):
    lang = gen_language(SPEC, Rng(1))
    s = sample_paired(lang, n, Rng(seed))
    assert 2 * n <= len(s.speech) <= 4 * n
    assert lang.decode_speech(s.speech) == s.text
    assert len(s.pairs) == n
    for p in s.pairs:
        t0, t1 = p.text
        s0, s1 = p.speech
        assert lang.decode_speech(s.speech[s0:s1]) == s.text[t0:t1]


def test_noise_rate(noisy_lang):
    r = Rng(4)
    mism = total = 0
    while total < 10_000:
        s = sample_paired(noisy_lang, 50, r)
        clean = noisy_lang.expand(s.text)
        mism += sum(a != b for a, b in zip(clean, s.speech))
        total += len(clean)
    assert 0.08 <= mism / total <= 0.12


def test_length_must_be_positive(lang):
    with pytest.raises(ContractViolation):
        sample_paired(lang, 0, Rng(0))


# -- interleaving --------------------------------------------------------------


@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 5), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_interleave_lossless_and_spans_valid(n, lo, extra, seed):
    lang = gen_language(SPEC, Rng(1))
    r = Rng(seed)
    s = sample_paired(lang, n, r)
    rec = chunk_interleave(s, lo, lo + extra, r, 9)
    assert recover_text(rec, lang) == s.text
    if len(rec.chunks) > 1:
        assert {c.modality for c in rec.chunks} == {Modality.TEXT, Modality.SPEECH}
    stream = rec.speech_stream()
    prev_t = prev_s = 0
    for p in rec.pairs:
        assert p.text[0] < p.text[1] and p.speech[0] < p.speech[1]
        assert p.text[0] >= prev_t and p.speech[0] >= prev_s
        prev_t, prev_s = p.text[1], p.speech[1]
        assert lang.decode_speech(stream[p.speech[0]:p.speech[1]]) == s.text[p.text[0]:p.text[1]]


def test_fixed_chunk_length(lang):
    r = Rng(2)
    s = sample_paired(lang, 23, r)
    rec = chunk_interleave(s, 5, 5, r)
    sizes = []
    for c in rec.chunks:
        sizes.append(len(c.ids) if c.modality == Modality.TEXT else len(lang.decode_speech(c.ids)))
    assert sizes == [5, 5, 5, 5, 3]


def test_short_record_single_chunk(lang):
    r = Rng(2)
    rec = chunk_interleave(sample_paired(lang, 3, r), 6, 12, r)
    assert len(rec.chunks) == 1


def test_chunk_length_histogram(lang):
    r = Rng(11)
    hist = collections.Counter()
    for _ in range(1000):
        s = sample_paired(lang, 60, r)
        rec = chunk_interleave(s, 6, 12, r)
        for c in rec.chunks[:-1]:  # the last chunk is truncated by the record end
            hist[len(c.ids) if c.modality == Modality.TEXT else len(lang.decode_speech(c.ids))] += 1
    total = sum(hist.values())
    assert set(hist) == set(range(6, 13))
    for k in range(6, 13):
        assert abs(hist[k] / total - 1 / 7) <= 0.2 / 7


def test_bad_chunk_bounds(lang):
    with pytest.raises(ContractViolation):
        chunk_interleave(sample_paired(lang, 5, Rng(0)), 4, 3, Rng(0))


def test_tokens_insert_mode_switch():
    rec = InterleavedRecord(1, RecordKind.INTERLEAVED, [Chunk(Modality.TEXT, [5, 6]), Chunk(Modality.SPEECH, [9]),
                                                        Chunk(Modality.SPEECH, [10])])
    toks = rec.tokens()
    assert [(t.modality, t.id) for t in toks] == [
        (Modality.TEXT, BOS), (Modality.TEXT, 5), (Modality.TEXT, 6), (Modality.TEXT, MODE_SWITCH),
        (Modality.SPEECH, 9), (Modality.SPEECH, 10), (Modality.SPEECH, EOS)]


def test_unsupervised_record(lang):
    rec = unsupervised_record(sample_paired(lang, 4, Rng(0)), 3)
    assert rec.kind == RecordKind.UNSUPERVISED and rec.pairs == []
    assert all(c.modality == Modality.SPEECH for c in rec.chunks)


# -- WER and filtering ---------------------------------------------------------


def test_wer_examples():
    assert wer("abcde", "abcde") == 0.0
    assert wer(list("abcde"), list("abxde")) == 0.2
    assert wer([1, 2, 3], []) == 1.0
    with pytest.raises(ContractViolation):
        wer([], [1])


@given(st.lists(st.integers(0, 4), min_size=1, max_size=9), st.lists(st.integers(0, 4), max_size=9))
@settings(max_examples=200, deadline=None)
def test_wer_matches_recursive_oracle(ref, hyp):
    assert wer(ref, hyp) == edit_distance(ref, hyp) / len(ref)


def planted(n_ref: int, edits: int, rid: int):
    """Reference of n_ref tokens and a hypothesis with exactly ``edits`` substitutions."""
    ref = list(range(10, 10 + n_ref))
    hyp = list(ref)
    for k in range(edits):
        hyp[k] = 0
    return rid, ref, hyp


def test_filter_planted_wers():
    items = [planted(100, e, i) for i, e in enumerate([0, 10, 19, 20, 30])]
    res = filter_corpus(items, 0.2)
    assert res.kept == [0, 1, 2]
    assert [r for r, _ in res.rejected] == [3, 4]
    assert dict(res.rejected)[3] == 0.2


def test_filter_boundary_and_errors():
    res = filter_corpus([planted(1000, 199, 1), (2, [], [1]), planted(5, 1, 3)], 0.2)
    assert res.kept == [1]
    assert res.errors and res.errors[0][0] == 2
    assert res.rejected == [(3, 0.2)]
    with pytest.raises(ContractViolation):
        filter_corpus([], 0.0)


@given(st.lists(st.tuples(st.integers(1, 10), st.integers(0, 10)), min_size=1, max_size=20),
       st.floats(0.01, 1.0), st.floats(0.01, 1.0))
@settings(max_examples=100, deadline=None)
def test_filter_monotone_in_threshold(specs, t1, t2):
    lo, hi = sorted((t1, t2))
    items = [planted(n, min(e, n), i) for i, (n, e) in enumerate(specs)]
    assert set(filter_corpus(items, lo).kept) <= set(filter_corpus(items, hi).kept)


def test_rejection_log(tmp_path):
    res = filter_corpus([planted(5, 2, 7)], 0.2)
    p = tmp_path / "rej.csv"
    res.write_log(p)
    assert p.read_text() == "record_id,wer\n7,0.4\n"


# -- SFT -----------------------------------------------------------------------


def _pool(lang, n, r):
    return [(lang.sample_text(4, r), lang.sample_text(5, r)) for _ in range(n)]


def test_sft_four_configs_share_content(lang):
    r = Rng(5)
    pool = _pool(lang, 30, r)
    renders = {}
    for cfg_i, cfg in enumerate([SftConfig.S2S, SftConfig.S2T, SftConfig.T2S, SftConfig.T2T]):
        mix = [0.0] * 4
        mix[cfg_i] = 1.0
        renders[cfg] = build_sft(lang, pool, mix, Rng(1))
    for k in range(30):
        t2t = renders[SftConfig.T2T][k]
        assert all(t.modality == Modality.TEXT for t in t2t.question + t2t.answer)
        for cfg, pairs in renders.items():
            p = pairs[k]
            assert p.config == cfg and p.content_id == k
            assert p.question[0].id == BOS and p.answer[-1].id == EOS
            assert p.decoded(lang) == t2t.decoded(lang)


def test_sft_mix_counts(lang):
    pairs = build_sft(lang, _pool(lang, 10_000, Rng(1)), (0.25, 0.25, 0.25, 0.25), Rng(2))
    counts = collections.Counter(p.config for p in pairs)
    for c in SftConfig:
        assert abs(counts[c] - 2500) <= 125


def test_sft_mix_validation(lang):
    with pytest.raises(ContractViolation):
        build_sft(lang, [], (0.5, 0.5, 0.5, 0.5), Rng(0))


def test_sft_record_supervises_answer_only(lang):
    p = build_sft(lang, _pool(lang, 1, Rng(0)), (0.0, 1.0, 0.0, 0.0), Rng(0))[0]
    rec = p.to_record(4)
    toks = rec.tokens()
    sup = rec.supervision()
    first = [i for i, f in enumerate(sup) if f][0]
    # the position predicting MODE_SWITCH is the first supervised one
    assert toks[first + 1].id == MODE_SWITCH
    assert not sup[-1]


# -- persistence ---------------------------------------------------------------


def test_corpus_round_trip(tmp_path):
    c = build_corpus(SPEC, CorpusConfig(n_interleaved=15, n_unsup=5, n_text=5, n_sft=8, min_len=6, max_len=9))
    recs = c.interleaved + c.unsup + c.text + c.sft
    p = tmp_path / "c.jsonl"
    save_corpus(recs, p)
    back = load_corpus(p)
    assert [record_to_json(r) for r in back] == [record_to_json(r) for r in recs]
    assert back == recs


def test_schema_is_exact():
    rec = InterleavedRecord(3, RecordKind.INTERLEAVED, [Chunk(Modality.TEXT, [4]), Chunk(Modality.SPEECH, [7, 8])],
                            [AlignmentPair((1, 2), (0, 2))])
    assert record_to_json(rec) == '{"id":3,"kind":"interleaved","chunks":[{"m":"t","ids":[4]},{"m":"s","ids":[7,8]}],"pairs":[[[1,2],[0,2]]]}'


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_malformed_line_reports_index(tmp_path):
    rec = InterleavedRecord(1, RecordKind.UNSUPERVISED, [Chunk(Modality.SPEECH, [5])])
    p = tmp_path / "bad.jsonl"
    p.write_text(record_to_json(rec) + "\n" + record_to_json(rec) + "}}garbage\n")
    with pytest.raises(CorpusFormatError) as e:
        load_corpus(p)
    assert e.value.line == 2 and "line 2" in str(e.value)


def test_corpus_deterministic_and_ids():
    cfg = CorpusConfig(n_interleaved=10, n_unsup=3, n_text=4, n_sft=5, min_len=6, max_len=9)
    a, b = build_corpus(SPEC, cfg), build_corpus(SPEC, cfg)
    ja = [record_to_json(r) for r in a.interleaved + a.unsup + a.text + a.sft]
    assert ja == [record_to_json(r) for r in b.interleaved + b.unsup + b.text + b.sft]
    ids = [r.id for r in a.interleaved + a.unsup + a.text + a.sft]
    assert ids[0] == 1 and all(a < b for a, b in zip(ids, ids[1:]))
    other = build_corpus(CorpusSpec(text_vocab=32, speech_vocab=64, seed=2), cfg)
    assert [record_to_json(r) for r in other.interleaved] != ja[:10]
