"""Freeze policies, the shared update loop, and the staged recipes."""

import numpy as np
import pytest

from denoad import numcore as nc
from denoad.adapters import ActiveSelection, AdapterRegistry, new_adapter_set
from denoad.corpus import BatchSampler, LanguageId, PairData, Vocab
from denoad.errors import ConfigError, DataError, MissingAdapterError, NumericError
from denoad.inference import DecodeConfig, Translation
from denoad.model import ModelConfig, build_model, clone_model, load_model, save_model
from denoad.noising import NoiseSpec
from denoad.training import (
    FreezeMask,
    TrainConfig,
    add_new_language,
    apply_freeze,
    backtranslate_corpus,
    evaluate_denoising_loss,
    expand_directions,
    finetune_bt,
    finetune_cross_attention,
    needs_encoder_grad,
    pretrain_base,
    registry_tensors,
    run_updates,
    train_denoising_adapters,
)

EN = LanguageId("en", "pivot")
XX = LanguageId("xx", "auxiliary")
YY = LanguageId("yy", "auxiliary")
ZZ = LanguageId("zz", "unsupervised")
LANGS = (EN, XX, YY, ZZ)


def structured_sentences(rng, n, vocab_size, step):
    """First-order-predictable sentences so denoising has signal."""
    out = []
    for _ in range(n):
        length = int(rng.integers(5, 12))
        s = [int(rng.integers(6, vocab_size))]
        for _ in range(length - 1):
            s.append(6 + (s[-1] * step + int(rng.integers(0, 3))) % (vocab_size - 6))
        out.append(s)
    return out


@pytest.fixture(scope="module")
def world():
    vocab = Vocab.build([l.code for l in LANGS], [f"w{i}" for i in range(60)])
    v = len(vocab)
    rng = np.random.default_rng(77)
    steps = {"en": 7, "xx": 11, "yy": 13, "zz": 17}
    mono = {c: structured_sentences(rng, 150, v, steps[c]) for c in steps}
    heldout = {c: structured_sentences(rng, 15, v, steps[c]) for c in steps}
    noise = NoiseSpec(mask_token_id=vocab.mask_id, random_pool=np.asarray(vocab.content_ids))
    cfg = ModelConfig(
        vocab_size=v, enc_layers=1, dec_layers=2, hidden=32, heads=2,
        ffn_dim=48, max_positions=48, dropout=0.0, attn_dropout=0.0,
    )
    return {"vocab": vocab, "mono": mono, "heldout": heldout, "noise": noise, "cfg": cfg}


def fresh_model(world, seed=5):
    return build_model(world["cfg"], seed=seed)


def tcfg(n, **kw):
    base = dict(
        total_updates=n, seed=3, max_tokens=320, update_frequency=2,
        warmup_updates=min(2, n), max_lr=3e-3, dropout=0.0, attn_dropout=0.0,
        label_smoothing=0.0, weight_decay=0.0,
    )
    base.update(kw)
    return TrainConfig(**base)


def snap(tensors):
    return {n: t.data.copy() for n, t in tensors.items()}


def unchanged(before, tensors):
    return [n for n in sorted(before) if np.array_equal(before[n], tensors[n].data)]


def group_params(model, *names):
    groups = model.param_groups()
    return {n: model.params[n] for g in names for n in groups[g]}


def built_registry(world, model, langs=(EN, XX, YY, ZZ), bottleneck=6, seed=9):
    reg = AdapterRegistry()
    for lang in langs:
        reg.add(new_adapter_set(model, lang, bottleneck, seed=seed))
    return reg


# --- configuration and policy resolution ---


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(total_updates=-1)
    with pytest.raises(ConfigError):
        TrainConfig(total_updates=10, update_frequency=0)
    with pytest.raises(ConfigError):
        TrainConfig(total_updates=10, label_smoothing=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(total_updates=10, checkpoint_selection="newest")
    assert TrainConfig(total_updates=0).total_updates == 0


def test_unknown_policy_rejected():
    with pytest.raises(ConfigError, match="unknown freeze policy"):
        FreezeMask("train_everything_twice")


def test_policy_resolution_name_sets(world):
    model = fresh_model(world)
    aset = new_adapter_set(model, XX, 4, seed=1, with_output_delta=True)
    ap = aset.named_params()

    full = FreezeMask("pretrain_all").resolve(model)
    assert set(full) == set(model.params)

    ca = FreezeMask("cross_attn_only").resolve(model)
    assert set(ca) == set(group_params(model, "cross_attn"))
    assert all(".cross." in n for n in ca)

    ad = FreezeMask("adapters_only").resolve(model, ap)
    assert set(ad) == set(ap) - {"adapter.output_delta"}

    wd = FreezeMask("adapters_plus_output_proj").resolve(model, ap)
    assert set(wd) == set(ap)

    both = FreezeMask("cross_attn_plus_adapters").resolve(model, ap)
    assert set(both) == set(ca) | set(ap)


def test_adapter_policies_need_adapter_params(world):
    model = fresh_model(world)
    with pytest.raises(ConfigError, match="none were provided"):
        FreezeMask("adapters_only").resolve(model, None)
    plain = new_adapter_set(model, XX, 4, seed=1).named_params()
    with pytest.raises(ConfigError, match="output-projection delta"):
        FreezeMask("adapters_plus_output_proj").resolve(model, plain)


def test_needs_encoder_grad():
    assert not needs_encoder_grad(["dec.0.cross.wq", "dec.1.cross.bo"])
    assert not needs_encoder_grad(["embed.dec_pos", "adapter.dec.0.w_up", "out.proj"])
    assert needs_encoder_grad(["dec.0.cross.wq", "enc.0.ffn.w1"])
    assert needs_encoder_grad(["adapter.enc.2.ln_gain"])
    assert needs_encoder_grad(["embed.tokens"])
    assert needs_encoder_grad(["embed.enc_pos"])


def test_apply_freeze_sets_flags(world):
    model = fresh_model(world)
    aset = new_adapter_set(model, XX, 4, seed=1)
    ap = aset.named_params()
    trainable = apply_freeze(FreezeMask("cross_attn_only"), model, ap)
    for n, t in model.params.items():
        assert t.requires_grad == (n in trainable), n
    assert all(not t.requires_grad for t in ap.values())


# --- freeze exactness ---


def test_adapter_training_freezes_base(world):
    model = fresh_model(world)
    before = snap(model.params)
    aset, log = train_denoising_adapters(
        model, XX, world["mono"]["xx"], world["noise"], world["vocab"], tcfg(6), bottleneck=6
    )
    assert unchanged(before, model.params) == sorted(before)
    moved = [n for n, t in aset.named_params().items()
             if not np.array_equal(t.data, np.zeros_like(t.data)) or "w_down" in n]
    assert "adapter.enc.0.w_up" in moved
    assert log.updates == 6 and log.policy == "adapters_only"


def test_cross_attn_training_freezes_everything_else(world):
    model = fresh_model(world)
    reg = built_registry(world, model)
    frozen_model = snap({n: t for n, t in model.params.items() if ".cross." not in n})
    cross_before = snap(group_params(model, "cross_attn"))
    adapter_sums = {c: reg.get(c).checksum() for c in reg.languages()}
    pairs = expand_directions(
        {"xx": (world["mono"]["xx"][:30], world["mono"]["en"][:30])}, pivot="en"
    )
    finetune_cross_attention(model, reg, pairs, world["vocab"], tcfg(6))
    assert unchanged(frozen_model, model.params) == sorted(frozen_model)
    assert {c: reg.get(c).checksum() for c in reg.languages()} == adapter_sums
    cross_now = group_params(model, "cross_attn")
    assert any(not np.array_equal(cross_before[n], cross_now[n].data) for n in cross_before)


def test_new_language_leaves_shared_model_untouched(world):
    model = fresh_model(world)
    before = snap(model.params)
    fp = model.fingerprint()
    aset, _ = add_new_language(
        model, ZZ, world["mono"]["zz"], world["noise"], world["vocab"], tcfg(6), bottleneck=6
    )
    assert unchanged(before, model.params) == sorted(before)
    assert model.fingerprint() == fp
    assert aset.output_projection_delta is not None
    assert not np.array_equal(
        aset.output_projection_delta.data,
        np.zeros_like(aset.output_projection_delta.data),
    )


def test_optimizer_state_covers_exactly_the_trainables(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, XX))
    pairs = expand_directions({"xx": (world["mono"]["xx"][:20], world["mono"]["en"][:20])})
    seen = {}
    finetune_cross_attention(
        model, reg, pairs, world["vocab"], tcfg(2),
        on_update=lambda done, opt: seen.update(m=set(opt.state.m), v=set(opt.state.v)),
    )
    want = set(group_params(model, "cross_attn"))
    assert seen["m"] == want and seen["v"] == want


# --- loop mechanics ---


def test_zero_updates_leave_parameters_bit_identical(world):
    model = fresh_model(world)
    before = snap(model.params)
    pairs = [PairData("en", "en", world["mono"]["en"], world["mono"]["en"], world["noise"])]
    sampler = BatchSampler(pairs, 320)
    log = run_updates(
        model, sampler, world["vocab"], FreezeMask("pretrain_all"),
        tcfg(0, warmup_updates=0),
    )
    assert unchanged(before, model.params) == sorted(before)
    assert log.updates == 0 and log.losses == []


def test_resume_from_checkpoint_is_bit_exact(world, tmp_path):
    mono = world["mono"]
    vocab, noise = world["vocab"], world["noise"]
    cfg = tcfg(7, seed=21)

    def make_sampler():
        pairs = [PairData("en", "en", mono["en"], mono["en"], noise),
                 PairData("xx", "xx", mono["xx"], mono["xx"], noise)]
        return BatchSampler(pairs, cfg.max_tokens)

    one_shot = fresh_model(world)
    log_a = run_updates(one_shot, make_sampler(), vocab, FreezeMask("pretrain_all"), cfg)

    ckpt = tmp_path / "mid.dmdl"
    interrupted = fresh_model(world)

    def save_mid(done, opt):
        if done == 3:
            extras = {f"opt.m.{n}": opt.state.m[n] for n in opt.state.m}
            extras.update({f"opt.v.{n}": opt.state.v[n] for n in opt.state.v})
            save_model(interrupted, str(ckpt), extra_meta={"opt_t": opt.state.t},
                       extra_tensors=extras)

    with pytest.raises(StopIteration):
        # cut the run after the checkpoint lands, as an interrupt would
        def maybe_stop(done, opt):
            save_mid(done, opt)
            if done == 3:
                raise StopIteration
        run_updates(interrupted, make_sampler(), vocab, FreezeMask("pretrain_all"),
                    cfg, on_update=maybe_stop)

    resumed, meta, extras = load_model(str(ckpt))
    trainable = apply_freeze(FreezeMask("pretrain_all"), resumed)
    opt = nc.Adam(trainable, betas=cfg.betas, eps=cfg.adam_eps,
                  weight_decay=cfg.weight_decay)
    opt.state.t = int(meta["opt_t"])
    opt.state.m = {n: extras[f"opt.m.{n}"] for n in trainable}
    opt.state.v = {n: extras[f"opt.v.{n}"] for n in trainable}
    log_b = run_updates(resumed, make_sampler(), vocab, FreezeMask("pretrain_all"),
                        cfg, start_update=3, opt=opt)

    for n in one_shot.params:
        assert np.array_equal(one_shot.params[n].data, resumed.params[n].data), n
    assert log_b.updates == log_a.updates == 7
    assert log_a.losses[-1] == log_b.losses[-1]


def test_resumed_optimizer_must_match_policy(world):
    model = fresh_model(world)
    pairs = [PairData("en", "en", world["mono"]["en"], world["mono"]["en"], world["noise"])]
    wrong = nc.Adam({"embed.tokens": model.params["embed.tokens"]})
    with pytest.raises(ConfigError, match="different parameter set"):
        run_updates(model, BatchSampler(pairs, 320), world["vocab"],
                    FreezeMask("pretrain_all"), tcfg(2), opt=wrong)
    stale = nc.Adam({n: nc.Tensor(t.data.copy(), requires_grad=True)
                     for n, t in model.params.items()})
    with pytest.raises(ConfigError, match="stale tensor"):
        run_updates(model, BatchSampler(pairs, 320), world["vocab"],
                    FreezeMask("pretrain_all"), tcfg(2), opt=stale)


def test_non_finite_loss_aborts_with_numeric_error(world):
    model = fresh_model(world)
    model.params["embed.tokens"].data[:] = np.nan
    pairs = [PairData("en", "en", world["mono"]["en"], world["mono"]["en"], world["noise"])]
    with pytest.raises(NumericError, match="non-finite loss"):
        run_updates(model, BatchSampler(pairs, 320), world["vocab"],
                    FreezeMask("pretrain_all"), tcfg(2))


def test_adapter_stages_commute(world):
    # training yy first must not change what xx's stage produces
    model = fresh_model(world)
    direct, _ = train_denoising_adapters(
        model, XX, world["mono"]["xx"], world["noise"], world["vocab"], tcfg(4), bottleneck=6
    )
    model2 = fresh_model(world)
    train_denoising_adapters(
        model2, YY, world["mono"]["yy"], world["noise"], world["vocab"], tcfg(4), bottleneck=6
    )
    after_other, _ = train_denoising_adapters(
        model2, XX, world["mono"]["xx"], world["noise"], world["vocab"], tcfg(4), bottleneck=6
    )
    assert direct.checksum() == after_other.checksum()


# --- learning behaviour ---


@pytest.mark.slow
def test_pretraining_halves_heldout_denoising_loss(world):
    model = fresh_model(world)
    vocab, noise = world["vocab"], world["noise"]
    before = evaluate_denoising_loss(model, world["heldout"]["en"], EN, noise, vocab, seed=9)
    cfg = tcfg(300, seed=4, warmup_updates=10)
    pretrain_base(model, {c: world["mono"][c] for c in ("en", "xx")}, noise, vocab, cfg)
    after = evaluate_denoising_loss(model, world["heldout"]["en"], EN, noise, vocab, seed=9)
    assert after < 0.5 * before, f"{after:.3f} vs {before:.3f}"


@pytest.mark.slow
def test_trained_adapters_beat_identity_on_heldout(world):
    model = fresh_model(world)
    vocab, noise = world["vocab"], world["noise"]
    pretrain_base(model, {"en": world["mono"]["en"]}, noise, vocab, tcfg(100, seed=4,
                  warmup_updates=10))
    aset, _ = train_denoising_adapters(
        model, XX, world["mono"]["xx"], noise, vocab, tcfg(150, seed=5, warmup_updates=10),
        bottleneck=16,
    )
    sel = ActiveSelection(XX, XX, aset.encoder_stack, aset.decoder_stack)
    identity = new_adapter_set(model, XX, 16, seed=99)
    sel_id = ActiveSelection(XX, XX, identity.encoder_stack, identity.decoder_stack)
    xx_held = world["heldout"]["xx"]
    trained = evaluate_denoising_loss(model, xx_held, XX, noise, vocab, 9, selection=sel)
    frozen = evaluate_denoising_loss(model, xx_held, XX, noise, vocab, 9, selection=sel_id)
    assert trained < frozen, f"{trained:.3f} vs {frozen:.3f}"


def test_heldout_loss_is_batching_invariant(world):
    model = fresh_model(world)
    coarse = evaluate_denoising_loss(
        model, world["heldout"]["en"], EN, world["noise"], world["vocab"], 9, max_tokens=4096
    )
    fine = evaluate_denoising_loss(
        model, world["heldout"]["en"], EN, world["noise"], world["vocab"], 9, max_tokens=48
    )
    assert coarse == pytest.approx(fine, rel=1e-3)


# --- stage 2 ---


def test_parallel_tuning_never_samples_unsupervised_pairs(world):
    model = fresh_model(world)
    reg = built_registry(world, model)
    par = {"xx": (world["mono"]["xx"][:25], world["mono"]["en"][:25]),
           "yy": (world["mono"]["yy"][:25], world["mono"]["en"][:25])}
    log = finetune_cross_attention(model, reg, expand_directions(par), world["vocab"], tcfg(5))
    assert set(log.batch_counts) <= {"xx-en", "en-xx", "yy-en", "en-yy"}
    assert all("zz" not in k for k in log.batch_counts)
    assert sum(log.batch_counts.values()) == 5 * 2


def test_parallel_tuning_guards(world):
    model = fresh_model(world)
    reg = built_registry(world, model)
    vocab = world["vocab"]
    sents = world["mono"]["en"][:10]
    with pytest.raises(ConfigError, match="unsupervised"):
        finetune_cross_attention(model, reg, [PairData("zz", "en", sents, sents)], vocab, tcfg(2))
    with pytest.raises(ConfigError, match="not a translation pair"):
        finetune_cross_attention(model, reg, [PairData("en", "en", sents, sents)], vocab, tcfg(2))
    with pytest.raises(MissingAdapterError):
        finetune_cross_attention(model, reg, [PairData("qq", "en", sents, sents)], vocab, tcfg(2))
    with pytest.raises(ConfigError):
        finetune_cross_attention(model, reg, [], vocab, tcfg(2))


def test_best_selection_restores_best_point(world):
    model = fresh_model(world)
    pairs = [PairData("en", "en", world["mono"]["en"], world["mono"]["en"], world["noise"])]
    sampler = BatchSampler(pairs, 320)
    scripted = iter([9.0, 1.0])
    captured = {}

    def grab(done, opt):
        if done == 2:
            captured["at2"] = snap(model.params)

    log = run_updates(
        model, sampler, world["vocab"], FreezeMask("pretrain_all"),
        tcfg(4, eval_interval=2, checkpoint_selection="best_bleu"),
        validate_fn=lambda m: next(scripted), on_update=grab,
    )
    assert log.best_update == 2 and log.best_score == 9.0
    assert log.val_history == [(2, 9.0), (4, 1.0)]
    for n in model.params:
        assert np.array_equal(model.params[n].data, captured["at2"][n]), n


def test_greedy_bleu_validation_history(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, XX))
    pairs = expand_directions({"xx": (world["mono"]["xx"][:20], world["mono"]["en"][:20])})
    log = finetune_cross_attention(
        model, reg, pairs, world["vocab"],
        tcfg(4, eval_interval=2, checkpoint_selection="best_bleu"),
        validation=[("xx", "en", world["mono"]["xx"][:3], world["mono"]["en"][:3]),
                    ("en", "xx", world["mono"]["en"][:3], world["mono"]["xx"][:3])],
    )
    assert [u for u, _ in log.val_history] == [2, 4]
    assert all(np.isfinite(s) and s >= 0.0 for _, s in log.val_history)
    assert log.best_update in (2, 4)


def test_best_selection_requires_validator(world):
    model = fresh_model(world)
    pairs = [PairData("en", "en", world["mono"]["en"], world["mono"]["en"], world["noise"])]
    with pytest.raises(ConfigError, match="needs a validate_fn"):
        run_updates(model, BatchSampler(pairs, 320), world["vocab"],
                    FreezeMask("pretrain_all"),
                    tcfg(2, checkpoint_selection="best_bleu"))


def test_expand_directions_shapes_and_alignment(world):
    xx = world["mono"]["xx"][:4]
    en = world["mono"]["en"][:4]
    pairs = expand_directions({"xx": (xx, en)})
    assert [p.key for p in pairs] == ["xx-en", "en-xx"]
    assert pairs[0].src is xx and pairs[0].tgt is en
    assert pairs[1].src is en and pairs[1].tgt is xx
    with pytest.raises(DataError, match="misaligned"):
        expand_directions({"xx": (xx, en[:3])})


# --- back-translation ---


def oracle_from(table):
    def translator(sents):
        return [Translation(tuple(table[tuple(s)]), -1.0, -1.0, False, None)
                for s in sents]
    return translator


def test_backtranslation_with_oracle_recovers_gold_pairs(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, ZZ))
    zz = world["mono"]["zz"][:15]
    gold_en = world["mono"]["en"][:15]
    table = {tuple(s): g for s, g in zip(zz, gold_en)}
    syn = backtranslate_corpus(model, reg, zz, "zz", "en", world["vocab"],
                               translator=oracle_from(table))
    assert syn.skipped == 0 and len(syn) == 15
    assert syn.originals == [list(s) for s in zz]
    assert syn.translations == [list(g) for g in gold_en]
    assert syn.provenance["kept"] == 15


def test_backtranslation_skips_stay_aligned(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, ZZ))
    zz = world["mono"]["zz"][:8]

    def flaky(sents):
        outs = []
        for i, s in enumerate(sents):
            if i == 1:
                outs.append(Translation((), 0.0, 0.0, False, "length budget"))
            elif i == 4:
                outs.append(Translation(tuple(s), -1.0, -1.0, True, None))
            elif i == 6:
                outs.append(Translation((), -0.5, -0.5, False, None))
            else:
                outs.append(Translation(tuple(s), -1.0, -1.0, False, None))
        return outs

    syn = backtranslate_corpus(model, reg, zz, "zz", "en", world["vocab"], translator=flaky)
    assert syn.skipped == 3 and len(syn) == 5
    kept = [s for i, s in enumerate(zz) if i not in (1, 4, 6)]
    assert syn.originals == [list(s) for s in kept]


def test_backtranslation_length_mismatch_rejected(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, ZZ))
    with pytest.raises(DataError, match="outputs for"):
        backtranslate_corpus(model, reg, world["mono"]["zz"][:5], "zz", "en",
                             world["vocab"], translator=lambda s: [])


def test_bt_finetune_is_copy_on_write(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, ZZ))
    zz = world["mono"]["zz"][:15]
    table = {tuple(s): g for s, g in zip(zz, world["mono"]["en"][:15])}
    syn = backtranslate_corpus(model, reg, zz, "zz", "en", world["vocab"],
                               translator=oracle_from(table))
    model_before = snap(model.params)
    set_sums = {c: reg.get(c).checksum() for c in reg.languages()}

    tuned = finetune_bt(model, syn, world["vocab"], tcfg(4),
                        policy="cross_attn_plus_adapters", registry=reg)
    assert (tuned.source_lang, tuned.target_lang) == ("en", "zz")
    assert unchanged(model_before, model.params) == sorted(model_before)
    assert {c: reg.get(c).checksum() for c in reg.languages()} == set_sums
    # the copy moved only cross-attention, so adapters stay bindable
    assert tuned.model.fingerprint() == model.fingerprint()
    assert tuned.adapters.get("en").checksum() != set_sums["en"]
    assert sorted(tuned.adapters.languages()) == ["en", "zz"]

    full = finetune_bt(model, syn, world["vocab"], tcfg(4), policy="full_finetune")
    assert unchanged(model_before, model.params) == sorted(model_before)
    assert full.adapters is None
    assert full.model.fingerprint() != model.fingerprint()


def test_bt_finetune_guards(world):
    model = fresh_model(world)
    reg = built_registry(world, model, langs=(EN, ZZ))
    zz = world["mono"]["zz"][:3]
    table = {tuple(s): g for s, g in zip(zz, world["mono"]["en"][:3])}
    syn = backtranslate_corpus(model, reg, zz, "zz", "en", world["vocab"],
                               translator=oracle_from(table))
    with pytest.raises(ConfigError, match="supports"):
        finetune_bt(model, syn, world["vocab"], tcfg(2), policy="adapters_only")
    with pytest.raises(ConfigError, match="registry"):
        finetune_bt(model, syn, world["vocab"], tcfg(2), policy="cross_attn_plus_adapters")
    empty = backtranslate_corpus(
        model, reg, zz, "zz", "en", world["vocab"],
        translator=lambda s: [Translation((), 0.0, 0.0, False, "x") for _ in s])
    with pytest.raises(DataError, match="empty"):
        finetune_bt(model, empty, world["vocab"], tcfg(2), policy="full_finetune")
