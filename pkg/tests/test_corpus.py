import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denoad import corpus as cp
from denoad.errors import ConfigError, DataError
from denoad.noising import NoiseSpec


def test_language_id_validation():
    cp.LanguageId("en", "pivot")
    with pytest.raises(ConfigError):
        cp.LanguageId("en", "mystery")
    with pytest.raises(ConfigError):
        cp.LanguageId("e n", "pivot")


def test_validate_languages_needs_one_pivot():
    en = cp.LanguageId("en", "pivot")
    aux = cp.LanguageId("aa", "auxiliary")
    assert cp.validate_languages([en, aux]) is en
    with pytest.raises(ConfigError):
        cp.validate_languages([aux])
    with pytest.raises(ConfigError):
        cp.validate_languages([en, en])


def test_vocab_layout_and_roundtrip(tmp_path):
    v = cp.Vocab.build(["en", "zz1"], ["w0", "w1", "w2"])
    assert v.pad_id == 0 and v.mask_id == 1 and v.eos_id == 2
    assert v.tag_id("en") == 3 and v.tag_id("zz1") == 4
    ids = v.encode("w2 w0 w1")
    assert v.decode(ids) == "w2 w0 w1"
    p = tmp_path / "vocab.txt"
    v.save(str(p))
    again = cp.Vocab.load(str(p))
    assert again.tokens == v.tokens
    with pytest.raises(DataError):
        v.encode("w99")


def test_vocab_rejects_misplaced_specials():
    with pytest.raises(ConfigError):
        cp.Vocab(["<mask>", "<pad>", "</s>"])


# --- proto corpus ---


def test_proto_corpus_deterministic_and_in_range():
    a = cp.gen_proto_corpus(400, 100, 1.0, (5, 20), seed=9)
    b = cp.gen_proto_corpus(400, 100, 1.0, (5, 20), seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(5 <= len(s) <= 20 for s in a)
    assert max(int(s.max()) for s in a) < 400


def test_proto_corpus_zipf_rank_ratio():
    # rank-2 / rank-1 frequency ratio ~ 2^-1 for exponent 1
    sents = cp.gen_proto_corpus(400, 90_000, 1.0, (5, 20), seed=7)
    counts = np.bincount(np.concatenate(sents), minlength=400)
    top = np.sort(counts)[::-1]
    assert top.sum() >= 1_000_000
    assert top[1] / top[0] == pytest.approx(0.5, rel=0.10)


def test_proto_corpus_uniform_at_zero_exponent():
    sents = cp.gen_proto_corpus(400, 40_000, 0.0, (5, 20), seed=3)
    toks = np.concatenate(sents)
    counts = np.bincount(toks, minlength=400)
    expected = toks.size / 400
    chi2 = ((counts - expected) ** 2 / expected).sum()
    # df = 399: mean 399, sd ~28; 520 sits past the 0.999 quantile
    assert chi2 < 520


def test_markov_successor_is_single_cycle():
    succ = cp.markov_successor(97, seed=5)
    assert sorted(succ) == list(range(97))
    cur, steps = 0, 0
    while True:
        cur = int(succ[cur])
        steps += 1
        if cur == 0:
            break
    assert steps == 97


# --- rendering ---


def _profiles():
    en = cp.cipher_profile(cp.LanguageId("en", "pivot"), 50, 0, seed=1, identity=True)
    zz = cp.cipher_profile(cp.LanguageId("zz1", "unsupervised"), 50, 50, seed=2)
    rr = cp.cipher_profile(
        cp.LanguageId("rr", "auxiliary"), 50, 100, seed=3, reorder_period=2
    )
    return en, zz, rr


def test_identity_profile_is_identity():
    en, _, _ = _profiles()
    s = np.array([4, 9, 0, 3])
    assert np.array_equal(cp.render_language(s, en), s)


@given(
    data=st.lists(st.integers(0, 49), min_size=1, max_size=25),
    which=st.integers(0, 2),
)
@settings(max_examples=60, deadline=None)
def test_render_roundtrip(data, which):
    profile = _profiles()[which]
    proto = np.array(data)
    surf = cp.render_language(proto, profile)
    assert np.array_equal(cp.inverse_render(surf, profile), proto)


def test_disjoint_blocks_share_no_tokens():
    en, zz, rr = _profiles()
    proto = np.arange(50)
    images = [set(cp.render_language(proto, p).tolist()) for p in (en, zz, rr)]
    assert images[0] & images[1] == set()
    assert images[0] & images[2] == set()
    assert images[1] & images[2] == set()


def test_render_out_of_domain_errors():
    en, _, _ = _profiles()
    with pytest.raises(DataError):
        cp.render_language(np.array([50]), en)
    with pytest.raises(DataError):
        cp.inverse_render(np.array([120]), en)


@given(
    st.lists(st.integers(0, 1000), min_size=0, max_size=30),
    st.sampled_from([0, 2, 3, 5]),
)
@settings(max_examples=60, deadline=None)
def test_reorder_is_self_inverse(data, period):
    arr = np.array(data, dtype=np.int64)
    once = cp._apply_reorder(arr, period)
    twice = cp._apply_reorder(once, period)
    assert np.array_equal(twice, arr)
    assert sorted(once.tolist()) == sorted(arr.tolist())


def test_reorder_period_one_rejected():
    with pytest.raises(ConfigError):
        cp.cipher_profile(cp.LanguageId("xx", "auxiliary"), 10, 0, seed=1, reorder_period=1)


# --- trimming ---


def test_trim_vocab_keeps_specials_and_used():
    v = cp.Vocab([cp.PAD, cp.MASK, cp.EOS, "a", "b", "c", "d"])
    corpus = [v.encode("a c"), v.encode("c a")]
    trimmed, id_map = cp.trim_vocab(v, corpus)
    assert trimmed.tokens == [cp.PAD, cp.MASK, cp.EOS, "a", "c"]
    kept = id_map[id_map >= 0]
    assert len(set(kept.tolist())) == len(kept)
    remapped = cp.apply_id_map(corpus, id_map)
    assert [trimmed.decode(s) for s in remapped] == ["a c", "c a"]


def test_trim_vocab_never_drops_tags():
    v = cp.Vocab.build(["en", "zz1"], ["w0", "w1"])
    trimmed, _ = cp.trim_vocab(v, [v.encode("w0")])
    assert "<en>" in trimmed.index and "<zz1>" in trimmed.index
    assert "w1" not in trimmed.index


def test_apply_id_map_rejects_dropped_tokens():
    v = cp.Vocab([cp.PAD, cp.MASK, cp.EOS, "a", "b"])
    trimmed, id_map = cp.trim_vocab(v, [v.encode("a")])
    with pytest.raises(DataError):
        cp.apply_id_map([v.encode("b")], id_map)


# --- temperature sampling ---


def test_temperature_probs_uniform_for_equal_sizes():
    spec = cp.SamplingSpec(sizes={"a": 70, "b": 70, "c": 70}, temperature=3.0)
    probs = cp.temperature_probs(spec)
    for p in probs.values():
        assert p == pytest.approx(1 / 3)


def test_temperature_probs_reference_values():
    flat = cp.temperature_probs(cp.SamplingSpec(sizes={"hi": 214000, "lo": 18000}, temperature=1.0))
    assert flat["hi"] == pytest.approx(0.922, abs=1e-3)
    assert flat["lo"] == pytest.approx(0.078, abs=1e-3)
    t5 = cp.temperature_probs(cp.SamplingSpec(sizes={"hi": 214000, "lo": 18000}, temperature=5.0))
    assert t5["hi"] == pytest.approx(0.621, abs=1e-3)
    assert t5["lo"] == pytest.approx(0.379, abs=1e-3)


def test_sampling_spec_validation():
    with pytest.raises(ConfigError):
        cp.SamplingSpec(sizes={"a": 10}, temperature=0.5)
    with pytest.raises(ConfigError):
        cp.SamplingSpec(sizes={"a": 0})
    with pytest.raises(ConfigError):
        cp.SamplingSpec(sizes={})


# --- batching ---


def _tiny_vocab():
    return cp.Vocab.build(["en", "zz1"], [f"w{i}" for i in range(20)])


def test_encode_rows_tag_convention():
    v = _tiny_vocab()
    w = lambda *ids: np.array([v.index[f"w{i}"] for i in ids])
    batch = cp.encode_rows(v, [w(3, 4), w(5)], [w(7, 8, 9), w(1)], "en", "zz1")
    en_tag, zz_tag, eos, pad = v.tag_id("en"), v.tag_id("zz1"), v.eos_id, v.pad_id
    assert batch.src.tolist() == [
        [v.index["w3"], v.index["w4"], eos, en_tag],
        [v.index["w5"], eos, en_tag, pad],
    ]
    assert batch.src_mask.tolist() == [[True] * 4, [True] * 3 + [False]]
    assert batch.tgt_in.tolist() == [
        [zz_tag, v.index["w7"], v.index["w8"], v.index["w9"]],
        [zz_tag, v.index["w1"], pad, pad],
    ]
    assert batch.labels.tolist() == [
        [v.index["w7"], v.index["w8"], v.index["w9"], eos],
        [v.index["w1"], eos, pad, pad],
    ]


def test_strip_row_recovers_content():
    v = _tiny_vocab()
    content = v.encode("w3 w4 w5")
    batch = cp.encode_rows(v, [content], [content], "en", "en")
    assert np.array_equal(cp.strip_row(batch.src[0], v), content)
    assert np.array_equal(cp.strip_row(batch.labels[0], v), content)


def _pair(v, lang, n, rng, noise=None, lo=3, hi=12):
    sents = [
        np.array(rng.choice(v.content_ids, size=rng.integers(lo, hi + 1)))
        for _ in range(n)
    ]
    return cp.PairData(lang, lang, sents, sents, noise=noise)


def test_single_pair_stream_and_budget():
    v = _tiny_vocab()
    rng = np.random.default_rng(0)
    sampler = cp.BatchSampler([_pair(v, "en", 50, rng)], max_tokens=64)
    draw = np.random.default_rng(1)
    for _ in range(200):
        b = sampler.sample(draw, v)
        assert b.src_lang == "en" and b.tgt_lang == "en"
        assert b.tgt_in.size <= 64
        assert b.labels.size <= 64


def test_batch_language_frequencies_track_temperature():
    v = _tiny_vocab()
    rng = np.random.default_rng(0)
    pairs = [_pair(v, "en", 300, rng), _pair(v, "zz1", 40, rng)]
    spec = cp.SamplingSpec(sizes={"en-en": 21400, "zz1-zz1": 1800}, temperature=5.0)
    sampler = cp.BatchSampler(pairs, max_tokens=48, spec=spec)
    draw = np.random.default_rng(2)
    for _ in range(10_000):
        sampler.sample(draw, v)
    total = sum(sampler.batch_counts.values())
    want = cp.temperature_probs(spec)
    for key, got in sampler.batch_counts.items():
        assert got / total == pytest.approx(want[key], abs=0.02)


def test_overlong_sentences_skipped_with_counter():
    v = _tiny_vocab()
    rng = np.random.default_rng(0)
    sents = [np.array(rng.choice(v.content_ids, size=4)) for _ in range(10)]
    long_sent = np.array(rng.choice(v.content_ids, size=30))
    pair = cp.PairData("en", "en", sents + [long_sent], list(sents) + [long_sent])
    sampler = cp.BatchSampler([pair], max_tokens=16)
    assert sampler.skipped == 1


def test_denoising_pair_corrupts_at_sample_time():
    v = _tiny_vocab()
    rng = np.random.default_rng(0)
    noise = NoiseSpec(mask_token_id=v.mask_id, random_replace_ratio=0.0)
    pair = _pair(v, "zz1", 30, rng, noise=noise, lo=8, hi=12)
    sampler = cp.BatchSampler([pair], max_tokens=400)
    b1 = sampler.sample(np.random.default_rng(5), v)
    b2 = sampler.sample(np.random.default_rng(5), v)
    assert np.array_equal(b1.src, b2.src)
    # corrupted source is shorter than the clean labels and contains masks
    assert (b1.src == v.mask_id).any()
    clean = sampler.sample(np.random.default_rng(6), v)
    assert clean.labels.shape[0] > 0


def test_build_batches_generator_contract():
    v = _tiny_vocab()
    rng = np.random.default_rng(0)
    pairs = [_pair(v, "en", 40, rng)]
    stream = cp.build_batches(pairs, 64, np.random.default_rng(3), None, v)
    got = list(itertools.islice(stream, 5))
    assert len(got) == 5
    assert all(isinstance(b, cp.PairedBatch) for b in got)


def test_corpus_file_roundtrip(tmp_path):
    v = _tiny_vocab()
    sents = [v.encode("w1 w2 w3"), v.encode("w4")]
    path = str(tmp_path / "mono.zz1")
    cp.save_corpus(path, sents, v)
    back = cp.load_corpus(path, v)
    assert all(np.array_equal(a, b) for a, b in zip(sents, back))
    with pytest.raises(DataError):
        cp.load_corpus(str(tmp_path / "missing.txt"), v)
