"""Training stages: base denoising pretrain, per-language adapters,
cross-attention transfer, new-language onboarding, back-translation.

Every stage is the same stateless update loop under a different freeze
policy.  Per-update rngs are derived from (seed, "train", update), so a
run interrupted at update k and resumed from a checkpoint replays the
identical batch and dropout streams.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .adapters import (
    ActiveSelection,
    AdapterRegistry,
    AdapterSet,
    clone_adapter_set,
    compose,
    new_adapter_set,
)
from .corpus import BatchSampler, LanguageId, PairData, SamplingSpec, Vocab, encode_rows
from .errors import ConfigError, DataError, NumericError
from .inference import DecodeConfig, translate_corpus
from .metrics import corpus_bleu
from .model import Model, clone_model
from .noising import NoiseSpec, corrupt_corpus
from .utils import derive_rng

# --- freeze policies ---

_MODEL_GROUPS = (
    "embeddings",
    "output_projection",
    "enc_self_attn",
    "dec_self_attn",
    "cross_attn",
    "enc_ffn",
    "dec_ffn",
    "layer_norms",
)

# adapter modes: "none" trains no adapter tensors, "no_delta" trains the
# layers but never an output-projection delta, "with_delta" requires one,
# "all" trains whatever tensors were handed in.
POLICIES = {
    "pretrain_all": (_MODEL_GROUPS, "none"),
    "full_finetune": (_MODEL_GROUPS, "none"),
    "adapters_only": ((), "no_delta"),
    "adapters_plus_output_proj": ((), "with_delta"),
    "cross_attn_only": (("cross_attn",), "none"),
    "cross_attn_plus_adapters": (("cross_attn",), "all"),
}


@dataclass(frozen=True)
class FreezeMask:
    """Named trainability policy resolved against a concrete model."""

    policy: str

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(
                f"unknown freeze policy {self.policy!r}; known: {sorted(POLICIES)}"
            )

    def resolve(self, model: Model, adapter_params=None) -> dict:
        """Trainable parameters as {name: tensor}; never empty."""
        group_names, adapter_mode = POLICIES[self.policy]
        groups = model.param_groups()
        out = {}
        for g in group_names:
            for name in groups[g]:
                out[name] = model.params[name]
        if adapter_mode != "none":
            if not adapter_params:
                raise ConfigError(
                    f"policy {self.policy!r} trains adapter parameters "
                    "but none were provided"
                )
            for name, t in adapter_params.items():
                if name == "adapter.output_delta" and adapter_mode == "no_delta":
                    continue
                out[name] = t
            if adapter_mode == "with_delta" and "adapter.output_delta" not in out:
                raise ConfigError(
                    "policy adapters_plus_output_proj needs an "
                    "output-projection delta (adapter set built without one)"
                )
        if not out:
            raise ConfigError(f"policy {self.policy!r} resolved to no parameters")
        return out


def apply_freeze(mask: FreezeMask, model: Model, adapter_params=None, extra_frozen=None):
    """Set requires_grad flags: trainable set on, everything else off.

    Returns the trainable {name: tensor} dict.  extra_frozen covers
    tensors outside model/adapter_params that must also stay fixed
    (e.g. every registered adapter set during cross-attention tuning).
    """
    trainable = mask.resolve(model, adapter_params)
    for t in model.params.values():
        t.requires_grad = False
    for t in (adapter_params or {}).values():
        t.requires_grad = False
    for t in extra_frozen or ():
        t.requires_grad = False
    for t in trainable.values():
        t.requires_grad = True
    return trainable


def needs_encoder_grad(trainable_names) -> bool:
    """Whether any trainable parameter sits on the encoder side of the
    graph.  When false the encoder can run outside the autodiff graph.
    Shared token embeddings count as encoder-side."""
    for n in trainable_names:
        if n.startswith("enc.") or n.startswith("adapter.enc."):
            return True
        if n in ("embed.tokens", "embed.enc_pos"):
            return True
    return False


def registry_tensors(registry: AdapterRegistry):
    """Every parameter tensor of every registered adapter set."""
    out = []
    for code in registry.languages():
        out.extend(registry.get(code).named_params().values())
    return out


# --- configuration ---


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings shared by all stages.

    Defaults follow the reference recipe: Adam(0.9, 0.98) with
    decoupled weight decay, label smoothing 0.2, 4k-token batches
    accumulated over 5 micro-batches, linear warmup then polynomial
    decay.  total_updates is deliberately not defaulted.
    """

    total_updates: int
    seed: int = 0
    max_tokens: int = 4096
    update_frequency: int = 5
    warmup_updates: int = 4000
    max_lr: float = 1e-4
    decay_power: float = 1.0
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    label_smoothing: float = 0.2
    dropout: float = 0.3
    attn_dropout: float = 0.1
    eval_interval: int = 0
    checkpoint_selection: str = "last"
    log_interval: int = 0

    def __post_init__(self):
        if self.total_updates < 0:
            raise ConfigError(f"total_updates must be >= 0, got {self.total_updates}")
        if self.update_frequency < 1:
            raise ConfigError(
                f"update_frequency must be >= 1, got {self.update_frequency}"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing out of range: {self.label_smoothing}")
        if self.checkpoint_selection not in ("last", "best_bleu"):
            raise ConfigError(
                f"checkpoint_selection must be 'last' or 'best_bleu', "
                f"got {self.checkpoint_selection!r}"
            )
        if self.eval_interval < 0 or self.log_interval < 0:
            raise ConfigError("intervals must be >= 0")

    def to_dict(self):
        d = dict(self.__dict__)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainLog:
    """What a stage did: loss curve, validation history, audit counters."""

    policy: str
    updates: int = 0
    losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_update: int | None = None
    best_score: float | None = None
    batch_counts: dict = field(default_factory=dict)
    skipped_sentences: int = 0
    seconds: float = 0.0

    def final_loss(self):
        return self.losses[-1][1] if self.losses else None


# --- core update loop ---


def run_updates(
    model: Model,
    sampler,
    vocab: Vocab,
    mask: FreezeMask,
    cfg: TrainConfig,
    select_fn=None,
    adapter_params=None,
    extra_frozen=None,
    validate_fn=None,
    start_update=0,
    opt=None,
    on_update=None,
) -> TrainLog:
    """Run cfg.total_updates optimizer steps (resuming at start_update).

    select_fn(batch) -> ActiveSelection binds adapters per batch; None
    trains the bare model.  validate_fn(model) -> float is called at
    eval points; under checkpoint_selection="best_bleu" the trainable
    parameters revert to the best-scoring point at the end.  on_update
    (update_index, optimizer) fires after every step, for checkpointing.
    """
    if cfg.checkpoint_selection == "best_bleu" and validate_fn is None:
        raise ConfigError("checkpoint_selection='best_bleu' needs a validate_fn")
    if not 0 <= start_update <= cfg.total_updates:
        raise ConfigError(
            f"start_update {start_update} outside [0, {cfg.total_updates}]"
        )
    trainable = apply_freeze(mask, model, adapter_params, extra_frozen)
    if opt is None:
        opt = nc.Adam(
            trainable, betas=cfg.betas, eps=cfg.adam_eps, weight_decay=cfg.weight_decay
        )
    else:
        if set(opt.params) != set(trainable):
            raise ConfigError(
                "resumed optimizer covers a different parameter set than "
                f"policy {mask.policy!r} resolves to"
            )
        for n, t in trainable.items():
            if opt.params[n] is not t:
                raise ConfigError(
                    f"resumed optimizer is bound to a stale tensor for {n!r}"
                )
    sched = nc.LrSchedule(
        cfg.warmup_updates, cfg.total_updates, cfg.max_lr, cfg.decay_power
    )
    enc_grad = needs_encoder_grad(trainable)
    log_every = cfg.log_interval or max(1, cfg.total_updates // 50)
    inv_uf = 1.0 / cfg.update_frequency
    log = TrainLog(policy=mask.policy)
    best_snapshot = None
    t0 = time.monotonic()
    model.dropout_rate = cfg.dropout
    model.attn_dropout_rate = cfg.attn_dropout
    try:
        for update in range(start_update, cfg.total_updates):
            rng = derive_rng(cfg.seed, "train", update)
            lr = nc.lr_at(update + 1, sched)
            opt.zero_grad()
            micro_losses = []
            for _ in range(cfg.update_frequency):
                batch = sampler.sample(rng, vocab)
                sel = select_fn(batch) if select_fn is not None else None
                loss = model.forward_loss(
                    batch,
                    selection=sel,
                    smoothing=cfg.label_smoothing,
                    rng=rng,
                    train=True,
                    encoder_grad=enc_grad,
                )
                val = float(loss.data)
                if not np.isfinite(val):
                    raise NumericError(
                        f"non-finite loss {val} at update {update} "
                        f"({batch.src_lang}->{batch.tgt_lang})"
                    )
                nc.mul(loss, inv_uf).backward()
                micro_losses.append(val)
            opt.step(lr)
            done = update + 1
            log.updates = done
            if done % log_every == 0 or done == cfg.total_updates:
                log.losses.append((done, float(np.mean(micro_losses))))
            at_eval = cfg.eval_interval and done % cfg.eval_interval == 0
            if validate_fn is not None and (at_eval or done == cfg.total_updates):
                score = float(validate_fn(model))
                log.val_history.append((done, score))
                if log.best_score is None or score > log.best_score:
                    log.best_score = score
                    log.best_update = done
                    if cfg.checkpoint_selection == "best_bleu":
                        best_snapshot = {
                            n: t.data.copy() for n, t in trainable.items()
                        }
            if on_update is not None:
                on_update(done, opt)
    finally:
        model.eval_mode()
    if cfg.checkpoint_selection == "best_bleu" and best_snapshot is not None:
        if log.best_update != log.updates:
            for n, snap in best_snapshot.items():
                trainable[n].data[...] = snap
    log.batch_counts = dict(getattr(sampler, "batch_counts", {}))
    log.skipped_sentences = int(getattr(sampler, "skipped", 0))
    log.seconds = time.monotonic() - t0
    return log


# --- stage drivers ---


def pretrain_base(
    model: Model,
    mono: dict,
    noise: NoiseSpec,
    vocab: Vocab,
    cfg: TrainConfig,
    temperature: float = 5.0,
    validate_fn=None,
    on_update=None,
) -> TrainLog:
    """Stage 0: denoise every monolingual corpus with all parameters
    trainable.  mono maps language code -> list of content-id sentences.
    Languages are sampled by temperature-scaled corpus size."""
    if not mono:
        raise ConfigError("pretrain_base needs at least one monolingual corpus")
    pairs = [
        PairData(code, code, sents, sents, noise) for code, sents in sorted(mono.items())
    ]
    spec = SamplingSpec({p.key: len(p) for p in pairs}, temperature)
    sampler = BatchSampler(pairs, cfg.max_tokens, spec)
    return run_updates(
        model,
        sampler,
        vocab,
        FreezeMask("pretrain_all"),
        cfg,
        validate_fn=validate_fn,
        on_update=on_update,
    )


def _train_language_adapters(model, language, sentences, noise, vocab, cfg,
                             bottleneck, policy, with_delta):
    aset = new_adapter_set(
        model, language, bottleneck, seed=cfg.seed, with_output_delta=with_delta
    )
    sel = ActiveSelection(
        source_language=language,
        target_language=language,
        encoder_adapters=aset.encoder_stack,
        decoder_adapters=aset.decoder_stack,
        output_delta=aset.output_projection_delta,
        parent_fingerprint=aset.parent_fingerprint,
    )
    pairs = [PairData(language.code, language.code, list(sentences), list(sentences), noise)]
    sampler = BatchSampler(pairs, cfg.max_tokens)
    log = run_updates(
        model,
        sampler,
        vocab,
        FreezeMask(policy),
        cfg,
        select_fn=lambda b: sel,
        adapter_params=aset.named_params(),
    )
    return aset, log


def train_denoising_adapters(
    model: Model,
    language: LanguageId,
    sentences,
    noise: NoiseSpec,
    vocab: Vocab,
    cfg: TrainConfig,
    bottleneck: int = 64,
):
    """Stage 1: one language's adapters on its monolingual data, base
    model frozen.  Returns (AdapterSet, TrainLog)."""
    return _train_language_adapters(
        model, language, sentences, noise, vocab, cfg, bottleneck,
        "adapters_only", with_delta=False,
    )


def add_new_language(
    model: Model,
    language: LanguageId,
    sentences,
    noise: NoiseSpec,
    vocab: Vocab,
    cfg: TrainConfig,
    bottleneck: int = 64,
):
    """Onboard a language the shared model never saw: train its adapters
    plus a private output-projection delta.  The shared model is not
    touched; the delta lives inside the returned AdapterSet."""
    return _train_language_adapters(
        model, language, sentences, noise, vocab, cfg, bottleneck,
        "adapters_plus_output_proj", with_delta=True,
    )


def expand_directions(parallel: dict, pivot: str = "en"):
    """Pivot-centric corpora -> both-direction PairData list.

    parallel maps aux code -> (aux_sentences, pivot_sentences), aligned.
    """
    out = []
    for code, (aux_sents, pivot_sents) in sorted(parallel.items()):
        if len(aux_sents) != len(pivot_sents):
            raise DataError(
                f"parallel corpus {code}-{pivot} is misaligned: "
                f"{len(aux_sents)} vs {len(pivot_sents)} sentences"
            )
        out.append(PairData(code, pivot, aux_sents, pivot_sents))
        out.append(PairData(pivot, code, pivot_sents, aux_sents))
    return out


def make_bleu_validator(registry, validation, vocab, decode_cfg=None, selection=None):
    """validate_fn computing macro-averaged greedy BLEU.

    validation: list of (src_code, tgt_code, src_sentences, ref_sentences)
    with content-id sentences.  Errored outputs score as empty strings.
    registry/selection are forwarded to the decoder, so the same
    validator drives adapter-composed, fixed-selection, and bare models.
    """
    if not validation:
        raise ConfigError("validator needs at least one validation set")
    cfg = decode_cfg or DecodeConfig(greedy=True)

    def validate(model):
        scores = []
        for src_code, tgt_code, srcs, refs in validation:
            outs = translate_corpus(
                model, registry, src_code, tgt_code, srcs, cfg=cfg, vocab=vocab,
                selection=selection,
            )
            hyps = ["" if o.error else vocab.decode(o.tokens) for o in outs]
            ref_strs = [vocab.decode(r) for r in refs]
            scores.append(corpus_bleu(hyps, ref_strs).score)
        return float(np.mean(scores))

    return validate


def finetune_cross_attention(
    model: Model,
    registry: AdapterRegistry,
    pairs,
    vocab: Vocab,
    cfg: TrainConfig,
    temperature: float = 5.0,
    validation=None,
    decode_cfg=None,
    on_update=None,
) -> TrainLog:
    """Stage 2: only cross-attention trains, on parallel data, with the
    per-batch adapter composition the pair calls for.  Every language in
    a pair must have registered adapters; unsupervised-role languages
    must not appear at all."""
    if not pairs:
        raise ConfigError("finetune_cross_attention needs parallel pairs")
    for p in pairs:
        if p.src_lang == p.tgt_lang:
            raise ConfigError(f"parallel pair {p.key} is not a translation pair")
        for code in (p.src_lang, p.tgt_lang):
            role = registry.get(code).language.role
            if role == "unsupervised":
                raise ConfigError(
                    f"language {code!r} has role 'unsupervised'; its parallel "
                    "data must not be used for cross-attention tuning"
                )
    spec = SamplingSpec({p.key: len(p) for p in pairs}, temperature)
    sampler = BatchSampler(pairs, cfg.max_tokens, spec)
    validate_fn = None
    if validation:
        validate_fn = make_bleu_validator(registry, validation, vocab, decode_cfg)
    return run_updates(
        model,
        sampler,
        vocab,
        FreezeMask("cross_attn_only"),
        cfg,
        select_fn=lambda b: compose(registry, b.src_lang, b.tgt_lang),
        extra_frozen=registry_tensors(registry),
        validate_fn=validate_fn,
        on_update=on_update,
    )


# --- back-translation ---


@dataclass
class SyntheticCorpus:
    """Machine-translated side plus the gold originals it came from."""

    source_lang: str
    target_lang: str
    originals: list
    translations: list
    skipped: int
    provenance: dict

    def __len__(self):
        return len(self.originals)


def backtranslate_corpus(
    model: Model,
    registry: AdapterRegistry,
    sentences,
    source_lang: str,
    target_lang: str,
    vocab: Vocab,
    decode_cfg: DecodeConfig | None = None,
    translator=None,
    parallelism=None,
) -> SyntheticCorpus:
    """Translate a monolingual corpus offline for back-translation.

    Failed or truncated or empty outputs are dropped (and counted), so
    kept originals and translations stay aligned.  translator(sentences)
    -> list of Translation overrides the built-in decoder; the default
    uses this model with the composed adapters for the direction.
    """
    cfg = decode_cfg or DecodeConfig(greedy=True)
    if translator is None:
        def translator(batch):
            return translate_corpus(
                model, registry, source_lang, target_lang, batch,
                cfg=cfg, parallelism=parallelism, vocab=vocab,
            )

    outs = translator(list(sentences))
    if len(outs) != len(sentences):
        raise DataError(
            f"translator returned {len(outs)} outputs for {len(sentences)} inputs"
        )
    originals, translations = [], []
    skipped = 0
    for src, out in zip(sentences, outs):
        if out.error or out.truncated or len(out.tokens) == 0:
            skipped += 1
            continue
        originals.append(list(src))
        translations.append(list(out.tokens))
    return SyntheticCorpus(
        source_lang=source_lang,
        target_lang=target_lang,
        originals=originals,
        translations=translations,
        skipped=skipped,
        provenance={
            "direction": f"{source_lang}-{target_lang}",
            "requested": len(sentences),
            "kept": len(originals),
            "skipped": skipped,
            "decode": {
                "greedy": cfg.greedy,
                "beam_size": cfg.beam_size,
                "length_penalty": cfg.length_penalty,
            },
        },
    )


@dataclass
class DirectionSystem:
    """A bilingual system produced by back-translation fine-tuning.

    Holds copies: the input model and adapter registry are never
    modified.  adapters is None for adapter-free policies.
    """

    source_lang: str
    target_lang: str
    model: Model
    adapters: AdapterRegistry | None
    log: TrainLog


def finetune_bt(
    model: Model,
    synthetic: SyntheticCorpus,
    vocab: Vocab,
    cfg: TrainConfig,
    policy: str = "cross_attn_plus_adapters",
    registry: AdapterRegistry | None = None,
    on_update=None,
) -> DirectionSystem:
    """Fine-tune one translation direction on back-translated pairs.

    Training direction: synthetic translations as sources, gold
    originals as targets (the model learns to produce real text from
    machine-translated text).  Inputs are copied first, so the shared
    model and registry survive untouched for other directions.
    """
    if policy not in ("full_finetune", "cross_attn_plus_adapters"):
        raise ConfigError(
            f"finetune_bt supports full_finetune or cross_attn_plus_adapters, "
            f"got {policy!r}"
        )
    if len(synthetic) == 0:
        raise DataError("back-translated corpus is empty")
    # train tgt_lang(synthetic) -> src_lang(gold): sources are the
    # machine translations, targets the human-quality originals.
    src_code = synthetic.target_lang
    tgt_code = synthetic.source_lang
    pairs = [PairData(src_code, tgt_code, synthetic.translations, synthetic.originals)]
    sampler = BatchSampler(pairs, cfg.max_tokens)
    tuned = clone_model(model)
    if policy == "full_finetune":
        log = run_updates(
            tuned, sampler, vocab, FreezeMask(policy), cfg, on_update=on_update
        )
        return DirectionSystem(src_code, tgt_code, tuned, None, log)

    if registry is None:
        raise ConfigError("cross_attn_plus_adapters needs the adapter registry")
    src_set = clone_adapter_set(registry.get(src_code))
    tgt_set = clone_adapter_set(registry.get(tgt_code))
    sel = ActiveSelection(
        source_language=src_set.language,
        target_language=tgt_set.language,
        encoder_adapters=src_set.encoder_stack,
        decoder_adapters=tgt_set.decoder_stack,
        output_delta=tgt_set.output_projection_delta,
        parent_fingerprint=src_set.parent_fingerprint,
    )
    # only the halves this direction exercises are trainable; the
    # unused halves stay frozen but ride along in the returned sets.
    active = {}
    for i, layer in enumerate(src_set.encoder_stack):
        active.update(layer.named(f"adapter.enc.{i}"))
    for i, layer in enumerate(tgt_set.decoder_stack):
        active.update(layer.named(f"adapter.dec.{i}"))
    if tgt_set.output_projection_delta is not None:
        active["adapter.output_delta"] = tgt_set.output_projection_delta
    idle = [
        t for stack in (src_set.decoder_stack, tgt_set.encoder_stack)
        for layer in stack for t in layer.named("x").values()
    ]
    log = run_updates(
        tuned,
        sampler,
        vocab,
        FreezeMask(policy),
        cfg,
        select_fn=lambda b: sel,
        adapter_params=active,
        extra_frozen=idle,
        on_update=on_update,
    )
    out_reg = AdapterRegistry(parent_fingerprint=src_set.parent_fingerprint)
    out_reg.add(src_set)
    if tgt_code != src_code:
        out_reg.add(tgt_set)
    return DirectionSystem(src_code, tgt_code, tuned, out_reg, log)


# --- held-out diagnostics ---


def evaluate_denoising_loss(
    model: Model,
    sentences,
    language: LanguageId,
    noise: NoiseSpec,
    vocab: Vocab,
    seed: int,
    selection: ActiveSelection | None = None,
    smoothing: float = 0.0,
    max_tokens: int = 4096,
) -> float:
    """Token-weighted mean denoising loss on a held-out corpus.

    Corruption is seeded per sentence, so the same (corpus, seed) pair
    always yields the same loss regardless of batching."""
    corrupted, _ = corrupt_corpus(sentences, noise, seed)
    total_loss = 0.0
    total_tokens = 0
    i = 0
    n = len(sentences)
    with nc.no_grad():
        while i < n:
            j = i + 1
            width = max(len(corrupted[i]), len(sentences[i])) + 2
            while j < n:
                width = max(width, len(corrupted[j]) + 2, len(sentences[j]) + 2)
                if (j - i + 1) * width > max_tokens:
                    break
                j += 1
            batch = encode_rows(
                vocab, corrupted[i:j], sentences[i:j], language.code, language.code
            )
            loss = model.forward_loss(
                batch, selection=selection, smoothing=smoothing, train=False
            )
            ntok = batch.real_target_tokens
            total_loss += float(loss.data) * ntok
            total_tokens += ntok
            i = j
    if total_tokens == 0:
        raise DataError("held-out corpus has no target tokens")
    return total_loss / total_tokens
