"""Experiment manifests, the on-disk artifact workspace, and the full
benchmark pipeline.

A manifest fully determines a run.  Every pipeline step writes its
outputs plus a stamp recording the hash of everything it consumed;
rerunning a step whose stamp still matches is a no-op, so commands are
idempotent and a finished benchmark reruns byte-identically.
"""

import json
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc
from .adapters import (
    ActiveSelection,
    AdapterRegistry,
    load_adapter_set,
    new_adapter_set,
    save_adapter_set,
)
from .corpus import (
    BatchSampler,
    LanguageId,
    PairData,
    SamplingSpec,
    Vocab,
    apply_id_map,
    cipher_profile,
    gen_proto_corpus,
    load_corpus,
    render_language,
    save_corpus,
    surface_token,
    trim_vocab,
    validate_languages,
)
from .errors import ConfigError, DataError
from .inference import DecodeConfig, translate_corpus
from .metrics import corpus_bleu
from .model import ModelConfig, build_model, load_model, save_model
from .noising import NoiseSpec
from .training import (
    FreezeMask,
    SyntheticCorpus,
    TrainConfig,
    add_new_language,
    backtranslate_corpus,
    expand_directions,
    finetune_bt,
    finetune_cross_attention,
    make_bleu_validator,
    pretrain_base,
    run_updates,
    train_denoising_adapters,
)
from .utils import atomic_write_text, derive_seed, json_canonical, sha256_hex

ROLES = ("pivot", "auxiliary", "unsupervised")
BT_POLICIES = ("cross_attn_plus_adapters", "full_finetune")
STAGES = ("pretrain", "adapters", "finetune_mt", "new_language", "finetune_bt")
SYSTEMS = ("mbart_ft", "task_adapters", "denoising")


# --- manifest ---


@dataclass(frozen=True)
class ExperimentLanguage:
    code: str
    role: str
    profile_seed: int = 0
    reorder_period: int = 0
    in_pretrain: bool = True

    def id(self) -> LanguageId:
        return LanguageId(self.code, self.role)


@dataclass(frozen=True)
class CorpusSpec:
    proto_vocab: int = 400
    zipf_exponent: float = 1.0
    markov_weight: float = 0.3
    len_range: tuple = (5, 20)
    seed: int = 7
    mono_sentences: int = 20000
    parallel_sentences: int = 2000
    validation_sentences: int = 150
    test_sentences: int = 300
    heldout_sentences: int = 200
    bt_sentences: int = 3000

    def __post_init__(self):
        for name in ("mono_sentences", "parallel_sentences", "validation_sentences",
                     "test_sentences", "heldout_sentences", "bt_sentences"):
            if getattr(self, name) < 1:
                raise ConfigError(f"corpus.{name} must be >= 1")


@dataclass
class ExperimentManifest:
    """Everything a run needs; serializable to/from JSON."""

    name: str
    seed: int
    languages: list
    corpus: CorpusSpec
    model: dict
    stages: dict
    out_dir: str | None = None
    noise: dict = field(default_factory=dict)
    sampling_temperature: float = 5.0
    adapter_bottleneck: int = 64
    task_adapter_bottleneck: int = 64
    decode: dict = field(default_factory=dict)
    bt: dict = field(default_factory=dict)
    composition_pair: tuple | None = None
    new_language_reference: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # lookups

    def language(self, code) -> ExperimentLanguage:
        for l in self.languages:
            if l.code == code:
                return l
        raise ConfigError(f"language {code!r} not in manifest")

    def pivot(self) -> ExperimentLanguage:
        return next(l for l in self.languages if l.role == "pivot")

    def auxiliaries(self):
        return [l for l in self.languages if l.role == "auxiliary"]

    def unsupervised(self, in_pretrain=None):
        out = [l for l in self.languages if l.role == "unsupervised"]
        if in_pretrain is not None:
            out = [l for l in out if l.in_pretrain == in_pretrain]
        return out

    def pretrain_languages(self):
        return [l for l in self.languages if l.in_pretrain]

    def bt_directions(self):
        return list(self.bt.get("directions", []))

    def bt_policy(self):
        return self.bt.get("policy", "cross_attn_plus_adapters")

    def validate(self):
        if not self.languages:
            raise ConfigError("manifest needs languages")
        validate_languages([l.id() for l in self.languages])
        for l in self.languages:
            if l.role not in ROLES:
                raise ConfigError(f"language {l.code!r} has unknown role {l.role!r}")
            if not l.in_pretrain and l.role != "unsupervised":
                raise ConfigError(
                    f"language {l.code!r} is outside pretraining but has role "
                    f"{l.role!r}; only unsupervised languages can be added later"
                )
        if not self.pivot().in_pretrain:
            raise ConfigError("the pivot language must be in pretraining")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stage keys: {sorted(unknown)}")
        for stage, d in self.stages.items():
            if "total_updates" not in d:
                raise ConfigError(f"stage {stage!r} must set total_updates")
        if self.bt_policy() not in BT_POLICIES:
            raise ConfigError(f"bt.policy must be one of {BT_POLICIES}")
        for d in self.bt_directions():
            self._check_direction(d)
        if self.composition_pair is not None:
            a, b = self.composition_pair
            for c in (a, b):
                lang = self.language(c)
                if lang.role != "unsupervised" or not lang.in_pretrain:
                    raise ConfigError(
                        f"composition pair language {c!r} must be an "
                        "unsupervised language from pretraining"
                    )
        for new_code, ref_code in self.new_language_reference.items():
            new = self.language(new_code)
            ref = self.language(ref_code)
            if new.in_pretrain:
                raise ConfigError(f"{new_code!r} is not a new language")
            if not (ref.role == "unsupervised" and ref.in_pretrain):
                raise ConfigError(
                    f"reference {ref_code!r} must be an unsupervised language "
                    "from pretraining"
                )

    def _check_direction(self, d):
        parts = d.split("-")
        if len(parts) != 2:
            raise ConfigError(f"direction {d!r} is not 'src-tgt'")
        s, t = parts
        pivot = self.pivot().code
        if pivot not in parts:
            raise ConfigError(f"direction {d!r} must involve the pivot {pivot!r}")
        other = t if s == pivot else s
        lang = self.language(other)
        if lang.role != "unsupervised" or not lang.in_pretrain:
            raise ConfigError(
                f"back-translation direction {d!r} needs an unsupervised "
                "language from pretraining"
            )
        return s, t

    # serialization

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "languages": [
                {"code": l.code, "role": l.role, "profile_seed": l.profile_seed,
                 "reorder_period": l.reorder_period, "in_pretrain": l.in_pretrain}
                for l in self.languages
            ],
            "corpus": {**self.corpus.__dict__, "len_range": list(self.corpus.len_range)},
            "model": dict(self.model),
            "stages": {k: dict(v) for k, v in self.stages.items()},
            "noise": dict(self.noise),
            "sampling_temperature": self.sampling_temperature,
            "adapter_bottleneck": self.adapter_bottleneck,
            "task_adapter_bottleneck": self.task_adapter_bottleneck,
            "decode": dict(self.decode),
            "bt": dict(self.bt),
            "composition_pair": list(self.composition_pair) if self.composition_pair else None,
            "new_language_reference": dict(self.new_language_reference),
        }

    def fingerprint(self) -> str:
        return sha256_hex(json_canonical(self.to_dict()).encode())

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("manifest must be a JSON object")
        try:
            langs = [ExperimentLanguage(**entry) for entry in d["languages"]]
            corpus_d = dict(d.get("corpus", {}))
            if "len_range" in corpus_d:
                corpus_d["len_range"] = tuple(corpus_d["len_range"])
            pair = d.get("composition_pair")
            return cls(
                name=d["name"],
                seed=int(d["seed"]),
                out_dir=d.get("out_dir"),
                languages=langs,
                corpus=CorpusSpec(**corpus_d),
                model=dict(d.get("model", {})),
                stages={k: dict(v) for k, v in d.get("stages", {}).items()},
                noise=dict(d.get("noise", {})),
                sampling_temperature=float(d.get("sampling_temperature", 5.0)),
                adapter_bottleneck=int(d.get("adapter_bottleneck", 64)),
                task_adapter_bottleneck=int(d.get("task_adapter_bottleneck", 64)),
                decode=dict(d.get("decode", {})),
                bt=dict(d.get("bt", {})),
                composition_pair=tuple(pair) if pair else None,
                new_language_reference=dict(d.get("new_language_reference", {})),
            )
        except KeyError as e:
            raise ConfigError(f"manifest missing field {e.args[0]!r}") from None
        except TypeError as e:
            raise ConfigError(f"malformed manifest: {e}") from None


def load_manifest(path) -> ExperimentManifest:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from None
    return ExperimentManifest.from_dict(data)


_STAGE_OPTIMIZER = {
    # adapters train with the higher lr and longer accumulation
    "adapters": {"max_lr": 2e-4, "update_frequency": 8},
    "new_language": {"max_lr": 2e-4, "update_frequency": 8},
}


def stage_config(manifest: ExperimentManifest, stage: str, seed_keys=()) -> TrainConfig:
    if stage not in manifest.stages:
        raise ConfigError(f"manifest has no stage {stage!r}")
    d = dict(manifest.stages[stage])
    for k, v in _STAGE_OPTIMIZER.get(stage, {}).items():
        d.setdefault(k, v)
    d.setdefault("seed", derive_seed(manifest.seed, "stage", stage, *seed_keys))
    return TrainConfig(**d)


def decode_config(manifest: ExperimentManifest) -> DecodeConfig:
    return DecodeConfig(**manifest.decode)


# --- workspace and stamps ---


@dataclass
class Workspace:
    manifest: ExperimentManifest
    out: str

    def path(self, *parts):
        return os.path.join(self.out, *parts)

    corpus_dir = property(lambda self: self.path("corpus"))
    base_model = property(lambda self: self.path("base", "model.dmdl"))

    def system_dir(self, name):
        return self.path("systems", name)

    def adapter_path(self, code):
        return self.path("adapters", f"{code}.dadp")

    def new_adapter_path(self, code):
        return self.path("new", f"{code}.dadp")

    def bt_dir(self, direction):
        return self.path("bt", direction)

    def write_resolved(self):
        os.makedirs(self.out, exist_ok=True)
        atomic_write_text(
            self.path("manifest.resolved.json"),
            json_canonical(self.manifest.to_dict()) + "\n",
        )


def workspace(manifest: ExperimentManifest, out_dir=None) -> Workspace:
    out = out_dir or manifest.out_dir
    if not out:
        raise ConfigError("no output directory: set manifest.out_dir or pass --out")
    ws = Workspace(manifest, out)
    ws.write_resolved()
    return ws


def _file_sha(path):
    try:
        with open(path, "rb") as f:
            return sha256_hex(f.read())
    except OSError as e:
        raise DataError(f"cannot read artifact {path}: {e}") from None


def _inputs_hash(obj) -> str:
    return sha256_hex(json_canonical(obj).encode())


def _write_stamp(stamp_path, inputs_hash, files):
    """files: absolute paths; recorded relative to the stamp's directory."""
    base = os.path.dirname(stamp_path)
    entry = {
        "inputs": inputs_hash,
        "files": {os.path.relpath(p, base): _file_sha(p) for p in files},
    }
    os.makedirs(base, exist_ok=True)
    atomic_write_text(stamp_path, json_canonical(entry) + "\n")


def _is_current(stamp_path, inputs_hash) -> bool:
    try:
        with open(stamp_path, encoding="utf-8") as f:
            entry = json.load(f)
    except (OSError, json.JSONDecodeError):
        return False
    if entry.get("inputs") != inputs_hash:
        return False
    base = os.path.dirname(stamp_path)
    for rel, digest in entry.get("files", {}).items():
        p = os.path.join(base, rel)
        if not os.path.exists(p) or _file_sha(p) != digest:
            return False
    return True


def _artifact_fingerprint(stamp_path) -> str:
    """Stable digest of a finished artifact, from its stamp."""
    try:
        with open(stamp_path, encoding="utf-8") as f:
            entry = json.load(f)
    except (OSError, json.JSONDecodeError):
        raise DataError(f"missing or unreadable stamp {stamp_path}") from None
    return _inputs_hash(entry)


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


# --- corpus generation ---


def _build_profiles(manifest):
    proto = manifest.corpus.proto_vocab
    profiles = {}
    for idx, lang in enumerate(manifest.languages):
        profiles[lang.code] = cipher_profile(
            lang.id(),
            proto,
            block_offset=idx * proto,
            seed=derive_seed(manifest.seed, "profile", lang.code, lang.profile_seed),
            reorder_period=lang.reorder_period,
            identity=(lang.role == "pivot"),
        )
    return profiles


def _proto_block(manifest, purpose, count, *keys):
    c = manifest.corpus
    return gen_proto_corpus(
        c.proto_vocab,
        count,
        c.zipf_exponent,
        c.len_range,
        seed=derive_seed(c.seed, purpose, *keys),
        markov_weight=c.markov_weight,
    )


def generate_world(manifest: ExperimentManifest):
    """All corpora as content ids under the trimmed vocabulary.

    Monolingual and held-out corpora are independent samples per
    language; each auxiliary parallel/validation block is one proto
    sample rendered in both its language and the pivot; the test block
    is one proto sample rendered in every language, so any direction
    pair is aligned by construction.
    """
    profiles = _build_profiles(manifest)
    codes = [l.code for l in manifest.languages]
    n_langs = len(codes)
    c = manifest.corpus
    full = Vocab.build(codes, [surface_token(i) for i in range(n_langs * c.proto_vocab)])
    base_id = 3 + n_langs

    def rendered(proto_sents, code):
        prof = profiles[code]
        return [base_id + render_language(p, prof) for p in proto_sents]

    mono, held = {}, {}
    for lang in manifest.languages:
        mono[lang.code] = rendered(
            _proto_block(manifest, "mono", c.mono_sentences, lang.code), lang.code)
        held[lang.code] = rendered(
            _proto_block(manifest, "held", c.heldout_sentences, lang.code), lang.code)
    parallel, validation = {}, {}
    pivot = manifest.pivot().code
    for lang in manifest.auxiliaries():
        block = _proto_block(manifest, "par", c.parallel_sentences, lang.code)
        parallel[lang.code] = (rendered(block, lang.code), rendered(block, pivot))
        vblock = _proto_block(manifest, "val", c.validation_sentences, lang.code)
        validation[lang.code] = (rendered(vblock, lang.code), rendered(vblock, pivot))
    test_block = _proto_block(manifest, "test", c.test_sentences)
    test = {code: rendered(test_block, code) for code in codes}

    def all_corpora():
        for d in (mono, held, test):
            for sents in d.values():
                yield from sents
        for d in (parallel, validation):
            for a, b in d.values():
                yield from a
                yield from b

    vocab, id_map = trim_vocab(full, all_corpora())

    def remap(d):
        return {k: apply_id_map(v, id_map) for k, v in d.items()}

    def remap_pairs(d):
        return {k: (apply_id_map(a, id_map), apply_id_map(b, id_map))
                for k, (a, b) in d.items()}

    return {
        "vocab": vocab,
        "mono": remap(mono),
        "held": remap(held),
        "parallel": remap_pairs(parallel),
        "validation": remap_pairs(validation),
        "test": remap(test),
    }


def _corpus_inputs(manifest):
    d = manifest.to_dict()
    return _inputs_hash({
        "languages": d["languages"],
        "corpus": d["corpus"],
        "seed": manifest.seed,
    })


def cmd_gen_corpus(ws: Workspace):
    t0 = time.monotonic()
    stamp = os.path.join(ws.corpus_dir, ".stamp.json")
    inputs = _corpus_inputs(ws.manifest)
    if _is_current(stamp, inputs):
        return {"path": ws.corpus_dir, "skipped": True, "seconds": 0.0}
    _log(f"[gen-corpus] generating into {ws.corpus_dir}")
    world = generate_world(ws.manifest)
    os.makedirs(ws.corpus_dir, exist_ok=True)
    vocab = world["vocab"]
    files = []

    def put(name, sents):
        p = os.path.join(ws.corpus_dir, name)
        save_corpus(p, sents, vocab)
        files.append(p)

    vocab_path = os.path.join(ws.corpus_dir, "vocab.txt")
    vocab.save(vocab_path)
    files.append(vocab_path)
    for code, sents in sorted(world["mono"].items()):
        put(f"mono.{code}.txt", sents)
    for code, sents in sorted(world["held"].items()):
        put(f"held.{code}.txt", sents)
    for code, (a, b) in sorted(world["parallel"].items()):
        put(f"par.{code}.aux.txt", a)
        put(f"par.{code}.piv.txt", b)
    for code, (a, b) in sorted(world["validation"].items()):
        put(f"val.{code}.aux.txt", a)
        put(f"val.{code}.piv.txt", b)
    for code, sents in sorted(world["test"].items()):
        put(f"test.{code}.txt", sents)
    meta_path = os.path.join(ws.corpus_dir, "meta.json")
    atomic_write_text(meta_path, json_canonical({
        "vocab_size": len(vocab),
        "languages": {l.code: l.role for l in ws.manifest.languages},
        "sizes": {os.path.basename(p): sum(1 for _ in open(p, encoding="utf-8"))
                  for p in files if p.endswith(".txt") and "vocab" not in p},
    }) + "\n")
    files.append(meta_path)
    _write_stamp(stamp, inputs, files)
    return {"path": ws.corpus_dir, "skipped": False, "seconds": time.monotonic() - t0}


class LoadedCorpus:
    """Lazy reader over the generated corpus files."""

    def __init__(self, ws: Workspace):
        self.ws = ws
        stamp = os.path.join(ws.corpus_dir, ".stamp.json")
        if not _is_current(stamp, _corpus_inputs(ws.manifest)):
            raise DataError(
                f"corpus in {ws.corpus_dir} is missing or stale; run gen-corpus"
            )
        self.fingerprint = _artifact_fingerprint(stamp)
        self.vocab = Vocab.load(os.path.join(ws.corpus_dir, "vocab.txt"))

    def _read(self, name):
        return load_corpus(os.path.join(self.ws.corpus_dir, name), self.vocab)

    def mono(self, code):
        return self._read(f"mono.{code}.txt")

    def held(self, code):
        return self._read(f"held.{code}.txt")

    def parallel(self, code):
        return self._read(f"par.{code}.aux.txt"), self._read(f"par.{code}.piv.txt")

    def validation(self, code):
        return self._read(f"val.{code}.aux.txt"), self._read(f"val.{code}.piv.txt")

    def test(self, code):
        return self._read(f"test.{code}.txt")

    def noise_spec(self):
        n = self.ws.manifest.noise
        return NoiseSpec(
            mask_token_id=self.vocab.mask_id,
            mask_ratio=float(n.get("mask_ratio", 0.3)),
            poisson_lambda=float(n.get("poisson_lambda", 3.5)),
            random_replace_ratio=float(n.get("random_replace_ratio", 0.1)),
            random_pool=np.asarray(self.vocab.content_ids),
        )


# --- training commands ---


def _model_config(manifest, vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab), **manifest.model)


def cmd_pretrain(ws: Workspace):
    t0 = time.monotonic()
    corpus = LoadedCorpus(ws)
    manifest = ws.manifest
    cfg = stage_config(manifest, "pretrain")
    stamp = ws.path("base", ".stamp.json")
    inputs = _inputs_hash({
        "corpus": corpus.fingerprint,
        "model": dict(manifest.model),
        "train": cfg.to_dict(),
        "model_seed": derive_seed(manifest.seed, "model"),
        "languages": sorted(l.code for l in manifest.pretrain_languages()),
        "temperature": manifest.sampling_temperature,
    })
    if _is_current(stamp, inputs):
        return {"path": ws.base_model, "skipped": True, "seconds": 0.0}
    _log(f"[pretrain] {cfg.total_updates} updates")
    model = build_model(_model_config(manifest, corpus.vocab),
                        seed=derive_seed(manifest.seed, "model"))
    mono = {l.code: corpus.mono(l.code) for l in manifest.pretrain_languages()}
    log = pretrain_base(model, mono, corpus.noise_spec(), corpus.vocab, cfg,
                        temperature=manifest.sampling_temperature)
    os.makedirs(ws.path("base"), exist_ok=True)
    save_model(model, ws.base_model, extra_meta={
        "stage": "pretrain", "updates": log.updates, "final_loss": log.final_loss(),
    })
    _write_stamp(stamp, inputs, [ws.base_model])
    return {"path": ws.base_model, "skipped": False, "seconds": time.monotonic() - t0}


def cmd_train_adapter(ws: Workspace, code: str):
    t0 = time.monotonic()
    manifest = ws.manifest
    lang = manifest.language(code)
    if not lang.in_pretrain:
        raise ConfigError(
            f"language {code!r} is not part of pretraining; use add-language"
        )
    corpus = LoadedCorpus(ws)
    cfg = replace(stage_config(manifest, "adapters"),
                  seed=derive_seed(manifest.seed, "stage", "adapters", code))
    out = ws.adapter_path(code)
    stamp = ws.path("adapters", f".stamp.{code}.json")
    inputs = _inputs_hash({
        "base": _file_sha(ws.base_model),
        "mono": _file_sha(os.path.join(ws.corpus_dir, f"mono.{code}.txt")),
        "train": cfg.to_dict(),
        "bottleneck": manifest.adapter_bottleneck,
    })
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    _log(f"[train-adapter] {code}: {cfg.total_updates} updates")
    model, _, _ = load_model(ws.base_model)
    aset, _ = train_denoising_adapters(
        model, lang.id(), corpus.mono(code), corpus.noise_spec(), corpus.vocab,
        cfg, bottleneck=manifest.adapter_bottleneck,
    )
    os.makedirs(ws.path("adapters"), exist_ok=True)
    save_adapter_set(aset, out)
    _write_stamp(stamp, inputs, [out])
    return {"path": out, "skipped": False, "seconds": time.monotonic() - t0}


def _load_registry(ws, model, codes, extra_paths=()):
    reg = AdapterRegistry(parent_fingerprint=model.fingerprint())
    for code in codes:
        reg.add(load_adapter_set(ws.adapter_path(code)))
    for p in extra_paths:
        reg.add(load_adapter_set(p))
    return reg


def _stage2_data(manifest, corpus):
    aux_codes = [l.code for l in manifest.auxiliaries()]
    parallel = {c: corpus.parallel(c) for c in aux_codes}
    pairs = expand_directions(parallel, pivot=manifest.pivot().code)
    pivot = manifest.pivot().code
    validation = []
    for c in aux_codes:
        aux_sents, piv_sents = corpus.validation(c)
        validation.append((c, pivot, aux_sents, piv_sents))
        validation.append((pivot, c, piv_sents, aux_sents))
    return pairs, validation


def _stage2_inputs(ws, corpus, cfg, extra):
    manifest = ws.manifest
    adapter_hashes = {
        c: _file_sha(ws.adapter_path(c))
        for c in sorted([l.code for l in manifest.auxiliaries()] + [manifest.pivot().code])
    }
    return _inputs_hash({
        "base": _file_sha(ws.base_model),
        "corpus": corpus.fingerprint,
        "adapters": adapter_hashes,
        "train": cfg.to_dict(),
        "decode": dict(manifest.decode),
        "temperature": manifest.sampling_temperature,
        **extra,
    })


def _save_system(ws, name, model, log, extra_meta=None, extra_files=()):
    d = ws.system_dir(name)
    os.makedirs(d, exist_ok=True)
    path = os.path.join(d, "model.dmdl")
    meta = {
        "stage": name,
        "updates": log.updates,
        "best_update": log.best_update,
        "best_score": log.best_score,
        "val_history": [[u, round(s, 6)] for u, s in log.val_history],
    }
    meta.update(extra_meta or {})
    save_model(model, path, extra_meta=meta)
    return path, [path, *extra_files]


def cmd_finetune_mt(ws: Workspace):
    t0 = time.monotonic()
    manifest = ws.manifest
    corpus = LoadedCorpus(ws)
    cfg = stage_config(manifest, "finetune_mt")
    stamp = os.path.join(ws.system_dir("denoising"), ".stamp.json")
    inputs = _stage2_inputs(ws, corpus, cfg, {"system": "denoising"})
    out = os.path.join(ws.system_dir("denoising"), "model.dmdl")
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    _log(f"[finetune-mt] {cfg.total_updates} updates, cross-attention only")
    model, _, _ = load_model(ws.base_model)
    codes = [l.code for l in manifest.auxiliaries()] + [manifest.pivot().code]
    registry = _load_registry(ws, model, codes)
    pairs, validation = _stage2_data(manifest, corpus)
    log = finetune_cross_attention(
        model, registry, pairs, corpus.vocab, cfg,
        temperature=manifest.sampling_temperature,
        validation=validation, decode_cfg=decode_config(manifest),
    )
    path, files = _save_system(ws, "denoising", model, log)
    _write_stamp(stamp, inputs, files)
    return {"path": path, "skipped": False, "seconds": time.monotonic() - t0,
            "best_score": log.best_score}


def _train_mbart_ft(ws: Workspace):
    """Full-fine-tune baseline: same parallel data and budget, no adapters."""
    t0 = time.monotonic()
    manifest = ws.manifest
    corpus = LoadedCorpus(ws)
    cfg = replace(stage_config(manifest, "finetune_mt"),
                  seed=derive_seed(manifest.seed, "stage", "finetune_mt", "mbart_ft"))
    stamp = os.path.join(ws.system_dir("mbart_ft"), ".stamp.json")
    inputs = _inputs_hash({
        "base": _file_sha(ws.base_model),
        "corpus": corpus.fingerprint,
        "train": cfg.to_dict(),
        "decode": dict(manifest.decode),
        "temperature": manifest.sampling_temperature,
        "system": "mbart_ft",
    })
    out = os.path.join(ws.system_dir("mbart_ft"), "model.dmdl")
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    _log(f"[bench] baseline mbart_ft: {cfg.total_updates} updates, all parameters")
    model, _, _ = load_model(ws.base_model)
    pairs, validation = _stage2_data(manifest, corpus)
    spec = SamplingSpec({p.key: len(p) for p in pairs}, manifest.sampling_temperature)
    sampler = BatchSampler(pairs, cfg.max_tokens, spec)
    validate_fn = make_bleu_validator(None, validation, corpus.vocab,
                                     decode_config(manifest))
    log = run_updates(model, sampler, corpus.vocab, FreezeMask("full_finetune"),
                      cfg, validate_fn=validate_fn)
    path, files = _save_system(ws, "mbart_ft", model, log)
    _write_stamp(stamp, inputs, files)
    return {"path": path, "skipped": False, "seconds": time.monotonic() - t0}


def _train_task_adapters(ws: Workspace):
    """Language-agnostic baseline: one shared adapter set for every
    language, trained with cross-attention on the parallel data."""
    t0 = time.monotonic()
    manifest = ws.manifest
    corpus = LoadedCorpus(ws)
    cfg = replace(stage_config(manifest, "finetune_mt"),
                  seed=derive_seed(manifest.seed, "stage", "finetune_mt", "task"))
    stamp = os.path.join(ws.system_dir("task_adapters"), ".stamp.json")
    inputs = _inputs_hash({
        "base": _file_sha(ws.base_model),
        "corpus": corpus.fingerprint,
        "train": cfg.to_dict(),
        "decode": dict(manifest.decode),
        "temperature": manifest.sampling_temperature,
        "bottleneck": manifest.task_adapter_bottleneck,
        "system": "task_adapters",
    })
    out = os.path.join(ws.system_dir("task_adapters"), "model.dmdl")
    shared_path = os.path.join(ws.system_dir("task_adapters"), "shared.dadp")
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    _log(f"[bench] baseline task_adapters: {cfg.total_updates} updates, shared set")
    model, _, _ = load_model(ws.base_model)
    shared = new_adapter_set(
        model, LanguageId("task", "auxiliary"), manifest.task_adapter_bottleneck,
        seed=derive_seed(manifest.seed, "task_adapters"),
    )
    sel = ActiveSelection(
        source_language=shared.language, target_language=shared.language,
        encoder_adapters=shared.encoder_stack, decoder_adapters=shared.decoder_stack,
        parent_fingerprint=shared.parent_fingerprint,
    )
    pairs, validation = _stage2_data(manifest, corpus)
    spec = SamplingSpec({p.key: len(p) for p in pairs}, manifest.sampling_temperature)
    sampler = BatchSampler(pairs, cfg.max_tokens, spec)
    validate_fn = make_bleu_validator(None, validation, corpus.vocab,
                                     decode_config(manifest), selection=sel)
    log = run_updates(
        model, sampler, corpus.vocab, FreezeMask("cross_attn_plus_adapters"), cfg,
        select_fn=lambda b: sel, adapter_params=shared.named_params(),
        validate_fn=validate_fn,
    )
    os.makedirs(ws.system_dir("task_adapters"), exist_ok=True)
    save_adapter_set(shared, shared_path)
    path, files = _save_system(ws, "task_adapters", model, log,
                               extra_files=[shared_path])
    _write_stamp(stamp, inputs, files)
    return {"path": path, "skipped": False, "seconds": time.monotonic() - t0}


def cmd_add_language(ws: Workspace, code: str):
    t0 = time.monotonic()
    manifest = ws.manifest
    lang = manifest.language(code)
    if lang.in_pretrain:
        raise ConfigError(
            f"language {code!r} was in pretraining; use train-adapter"
        )
    corpus = LoadedCorpus(ws)
    cfg = replace(stage_config(manifest, "new_language"),
                  seed=derive_seed(manifest.seed, "stage", "new_language", code))
    out = ws.new_adapter_path(code)
    stamp = ws.path("new", f".stamp.{code}.json")
    inputs = _inputs_hash({
        "base": _file_sha(ws.base_model),
        "mono": _file_sha(os.path.join(ws.corpus_dir, f"mono.{code}.txt")),
        "train": cfg.to_dict(),
        "bottleneck": manifest.adapter_bottleneck,
    })
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    _log(f"[add-language] {code}: {cfg.total_updates} updates with output delta")
    model, _, _ = load_model(ws.base_model)
    aset, _ = add_new_language(
        model, lang.id(), corpus.mono(code), corpus.noise_spec(), corpus.vocab,
        cfg, bottleneck=manifest.adapter_bottleneck,
    )
    os.makedirs(ws.path("new"), exist_ok=True)
    save_adapter_set(aset, out)
    _write_stamp(stamp, inputs, [out])
    return {"path": out, "skipped": False, "seconds": time.monotonic() - t0}


# --- back-translation commands ---


def _parse_direction(manifest, direction):
    return manifest._check_direction(direction)


def cmd_backtranslate(ws: Workspace, direction: str):
    """Produce synthetic data for training direction src-tgt by decoding
    the gold target-side monolingual corpus into the source language."""
    t0 = time.monotonic()
    manifest = ws.manifest
    s, t = _parse_direction(manifest, direction)
    corpus = LoadedCorpus(ws)
    d = ws.bt_dir(direction)
    stamp = os.path.join(d, ".stamp.json")
    sys_model = os.path.join(ws.system_dir("denoising"), "model.dmdl")
    inputs = _inputs_hash({
        "system": _file_sha(sys_model),
        "adapters": {c: _file_sha(ws.adapter_path(c)) for c in (s, t)},
        "mono": _file_sha(os.path.join(ws.corpus_dir, f"mono.{t}.txt")),
        "decode": dict(manifest.decode),
        "sentences": manifest.corpus.bt_sentences,
    })
    if _is_current(stamp, inputs):
        return {"path": d, "skipped": True, "seconds": 0.0}
    _log(f"[backtranslate] {direction}: decoding {t}->{s}")
    model, _, _ = load_model(sys_model)
    registry = _load_registry(ws, model, (s, t))
    gold = corpus.mono(t)[: manifest.corpus.bt_sentences]
    syn = backtranslate_corpus(
        model, registry, gold, t, s, corpus.vocab,
        decode_cfg=decode_config(manifest),
    )
    os.makedirs(d, exist_ok=True)
    orig_p = os.path.join(d, "originals.txt")
    tran_p = os.path.join(d, "translations.txt")
    meta_p = os.path.join(d, "meta.json")
    save_corpus(orig_p, syn.originals, corpus.vocab)
    save_corpus(tran_p, syn.translations, corpus.vocab)
    atomic_write_text(meta_p, json_canonical({
        "source_lang": syn.source_lang, "target_lang": syn.target_lang,
        "provenance": syn.provenance,
    }) + "\n")
    _write_stamp(stamp, inputs, [orig_p, tran_p, meta_p])
    return {"path": d, "skipped": False, "seconds": time.monotonic() - t0,
            "kept": len(syn), "bt_skipped": syn.skipped}


def cmd_finetune_bt(ws: Workspace, direction: str):
    t0 = time.monotonic()
    manifest = ws.manifest
    s, t = _parse_direction(manifest, direction)
    corpus = LoadedCorpus(ws)
    cfg = replace(stage_config(manifest, "finetune_bt"),
                  seed=derive_seed(manifest.seed, "stage", "finetune_bt", direction))
    policy = manifest.bt_policy()
    d = ws.bt_dir(direction)
    sys_dir = os.path.join(d, "system")
    stamp = os.path.join(sys_dir, ".stamp.json")
    syn_stamp = os.path.join(d, ".stamp.json")
    sys_model = os.path.join(ws.system_dir("denoising"), "model.dmdl")
    inputs = _inputs_hash({
        "synthetic": _artifact_fingerprint(syn_stamp),
        "system": _file_sha(sys_model),
        "adapters": {c: _file_sha(ws.adapter_path(c)) for c in (s, t)},
        "train": cfg.to_dict(),
        "policy": policy,
    })
    out = os.path.join(sys_dir, "model.dmdl")
    if _is_current(stamp, inputs):
        return {"path": out, "skipped": True, "seconds": 0.0}
    meta_p = os.path.join(d, "meta.json")
    try:
        with open(meta_p, encoding="utf-8") as f:
            syn_meta = json.load(f)
    except OSError:
        raise DataError(f"no synthetic corpus for {direction}; run backtranslate") from None
    syn = SyntheticCorpus(
        source_lang=syn_meta["source_lang"],
        target_lang=syn_meta["target_lang"],
        originals=load_corpus(os.path.join(d, "originals.txt"), corpus.vocab),
        translations=load_corpus(os.path.join(d, "translations.txt"), corpus.vocab),
        skipped=int(syn_meta["provenance"]["skipped"]),
        provenance=dict(syn_meta["provenance"]),
    )
    _log(f"[finetune-bt] {direction}: {cfg.total_updates} updates, policy {policy}")
    model, _, _ = load_model(sys_model)
    registry = _load_registry(ws, model, (s, t)) if policy != "full_finetune" else None
    tuned = finetune_bt(model, syn, corpus.vocab, cfg, policy=policy, registry=registry)
    os.makedirs(sys_dir, exist_ok=True)
    save_model(tuned.model, out, extra_meta={
        "stage": "finetune_bt", "direction": direction, "policy": policy,
        "updates": tuned.log.updates,
    })
    files = [out]
    if tuned.adapters is not None:
        ad = os.path.join(sys_dir, "adapters")
        os.makedirs(ad, exist_ok=True)
        for code in sorted(tuned.adapters.languages()):
            p = os.path.join(ad, f"{code}.dadp")
            save_adapter_set(tuned.adapters.get(code), p)
            files.append(p)
    _write_stamp(stamp, inputs, files)
    return {"path": out, "skipped": False, "seconds": time.monotonic() - t0}


# --- standalone decode/eval ---


def build_eval_registry(model, adapter_paths):
    reg = AdapterRegistry(parent_fingerprint=model.fingerprint())
    for p in adapter_paths:
        reg.add(load_adapter_set(p))
    return reg


def shared_selection(model, shared_path):
    shared = load_adapter_set(shared_path)
    reg = AdapterRegistry(parent_fingerprint=model.fingerprint())
    reg.add(shared)  # validates compatibility with the model
    return ActiveSelection(
        source_language=shared.language, target_language=shared.language,
        encoder_adapters=shared.encoder_stack, decoder_adapters=shared.decoder_stack,
        output_delta=shared.output_projection_delta,
        parent_fingerprint=shared.parent_fingerprint,
    )


def translate_lines(model, vocab, src, tgt, lines, registry=None, selection=None,
                    cfg=None, parallelism=None):
    """Text in, text out; decode errors surface as DataError."""
    for code in (src, tgt):
        if f"<{code}>" not in vocab.index:
            raise ConfigError(f"language {code!r} has no tag in the vocabulary")
    sentences = [vocab.encode(line) for line in lines]
    outs = translate_corpus(model, registry, src, tgt, sentences, cfg=cfg,
                            parallelism=parallelism, vocab=vocab, selection=selection)
    bad = [(i, o.error) for i, o in enumerate(outs) if o.error]
    if bad:
        i, err = bad[0]
        raise DataError(f"line {i + 1}: {err}")
    return [vocab.decode(o.tokens) for o in outs]


def evaluate_direction(model, vocab, src, tgt, src_sents, ref_sents,
                       registry=None, selection=None, cfg=None, with_chrf=False):
    outs = translate_corpus(model, registry, src, tgt, src_sents, cfg=cfg,
                            vocab=vocab, selection=selection)
    hyps = ["" if o.error else vocab.decode(o.tokens) for o in outs]
    refs = [vocab.decode(r) for r in ref_sents]
    report = {"bleu": corpus_bleu(hyps, refs).score, "sentences": len(hyps)}
    if with_chrf:
        from .metrics import chrf

        report["chrf"] = chrf(hyps, refs)
    return report


# --- the benchmark ---


def _r(x):
    return round(float(x), 4)


def _random_cipher_hyps(manifest, vocab, src_sents, src_code, tgt_code):
    """Chance baseline: a seeded random bijection between the two
    languages' surface blocks applied token-wise, no model involved."""
    proto = manifest.corpus.proto_vocab
    langs = [l.code for l in manifest.languages]
    si, ti = langs.index(src_code), langs.index(tgt_code)

    def block_ids(idx):
        lo, hi = idx * proto, (idx + 1) * proto
        return [i for i, tok in enumerate(vocab.tokens)
                if tok.startswith("w") and tok[1:].isdigit() and lo <= int(tok[1:]) < hi]

    src_ids, tgt_ids = block_ids(si), block_ids(ti)
    rng = np.random.default_rng(derive_seed(manifest.seed, "random-cipher"))
    perm = rng.permutation(len(tgt_ids))
    table = {s: tgt_ids[perm[k % len(tgt_ids)]] for k, s in enumerate(src_ids)}
    hyps = []
    for sent in src_sents:
        hyps.append(vocab.decode([table.get(int(t), int(t)) for t in sent]))
    return hyps


def _grid_eval(ws, corpus, timings):
    manifest = ws.manifest
    vocab = corpus.vocab
    pivot = manifest.pivot().code
    zz_codes = [l.code for l in manifest.unsupervised(in_pretrain=True)]
    dcfg = decode_config(manifest)
    test = {c: corpus.test(c) for c in {pivot, *zz_codes}}

    systems = {}
    loaded = {}
    for name in SYSTEMS:
        path = os.path.join(ws.system_dir(name), "model.dmdl")
        model, meta, _ = load_model(path)
        if name == "denoising":
            binder = {"registry": _load_registry(ws, model, [*zz_codes, pivot])}
        elif name == "task_adapters":
            sel = shared_selection(model, os.path.join(ws.system_dir(name), "shared.dadp"))
            binder = {"selection": sel}
        else:
            binder = {}
        loaded[name] = (model, meta, binder)
        t0 = time.monotonic()
        to_pivot, from_pivot = {}, {}
        for zz in zz_codes:
            to_pivot[zz] = _r(evaluate_direction(
                model, vocab, zz, pivot, test[zz], test[pivot], cfg=dcfg, **binder)["bleu"])
            from_pivot[zz] = _r(evaluate_direction(
                model, vocab, pivot, zz, test[pivot], test[zz], cfg=dcfg, **binder)["bleu"])
        to_pivot["macro"] = _r(np.mean([to_pivot[z] for z in zz_codes]))
        from_pivot["macro"] = _r(np.mean([from_pivot[z] for z in zz_codes]))
        systems[name] = {"zz_to_pivot": to_pivot, "pivot_to_zz": from_pivot}
        timings[f"eval.{name}"] = round(time.monotonic() - t0, 3)
        _log(f"[bench] {name}: zz->pivot macro {to_pivot['macro']:.2f}, "
             f"pivot->zz macro {from_pivot['macro']:.2f}")
    return systems, loaded, test


def cmd_bench(ws: Workspace):
    """Run the whole pipeline and write the comparison report."""
    manifest = ws.manifest
    timings = {}

    def record(phase, result):
        if not result.get("skipped"):
            timings[phase] = round(result["seconds"], 3)
        return result

    record("gen_corpus", cmd_gen_corpus(ws))
    record("pretrain", cmd_pretrain(ws))
    for lang in manifest.pretrain_languages():
        record(f"adapter.{lang.code}", cmd_train_adapter(ws, lang.code))
    record("finetune_mt", cmd_finetune_mt(ws))
    record("mbart_ft", _train_mbart_ft(ws))
    record("task_adapters", _train_task_adapters(ws))
    for lang in manifest.unsupervised(in_pretrain=False):
        record(f"new.{lang.code}", cmd_add_language(ws, lang.code))
    for direction in manifest.bt_directions():
        record(f"bt.{direction}", cmd_backtranslate(ws, direction))
        record(f"bt_ft.{direction}", cmd_finetune_bt(ws, direction))

    corpus = LoadedCorpus(ws)
    report_path = ws.path("reports", "bench.json")
    stamp = ws.path("reports", ".stamp.json")
    sys_hashes = {
        name: _file_sha(os.path.join(ws.system_dir(name), "model.dmdl"))
        for name in SYSTEMS
    }
    bt_hashes = {
        d: _file_sha(os.path.join(ws.bt_dir(d), "system", "model.dmdl"))
        for d in manifest.bt_directions()
    }
    new_hashes = {
        l.code: _file_sha(ws.new_adapter_path(l.code))
        for l in manifest.unsupervised(in_pretrain=False)
    }
    inputs = _inputs_hash({
        "corpus": corpus.fingerprint,
        "systems": sys_hashes,
        "bt": bt_hashes,
        "new": new_hashes,
        "decode": dict(manifest.decode),
        "manifest": manifest.fingerprint(),
    })
    if _is_current(stamp, inputs):
        _merge_timings(ws, timings)
        return {"path": report_path, "skipped": True, "seconds": 0.0}

    t_eval = time.monotonic()
    vocab = corpus.vocab
    pivot = manifest.pivot().code
    dcfg = decode_config(manifest)
    systems, loaded, test = _grid_eval(ws, corpus, timings)

    backtranslation = {"policy": manifest.bt_policy(), "directions": {}}
    for direction in manifest.bt_directions():
        s, t = _parse_direction(manifest, direction)
        d = ws.bt_dir(direction)
        model, meta, _ = load_model(os.path.join(d, "system", "model.dmdl"))
        ad_dir = os.path.join(d, "system", "adapters")
        if os.path.isdir(ad_dir):
            paths = [os.path.join(ad_dir, f) for f in sorted(os.listdir(ad_dir))
                     if f.endswith(".dadp")]
            registry = build_eval_registry(model, paths)
        else:
            registry = None
        zz = t if s == pivot else s
        if zz not in test:
            test[zz] = corpus.test(zz)
        after = _r(evaluate_direction(
            model, vocab, s, t, test[s], test[t], cfg=dcfg, registry=registry)["bleu"])
        key = "pivot_to_zz" if s == pivot else "zz_to_pivot"
        before = systems["denoising"][key][zz]
        backtranslation["directions"][direction] = {
            "before": before, "after": after, "delta": _r(after - before),
        }
        _log(f"[bench] bt {direction}: {before:.2f} -> {after:.2f}")

    new_language = {}
    den_model, _, den_binder = loaded["denoising"]
    for lang in manifest.unsupervised(in_pretrain=False):
        code = lang.code
        if code not in test:
            test[code] = corpus.test(code)
        registry = _load_registry(
            ws, den_model,
            [l.code for l in manifest.unsupervised(in_pretrain=True)] + [pivot],
            extra_paths=[ws.new_adapter_path(code)],
        )
        bleu = _r(evaluate_direction(
            den_model, vocab, code, pivot, test[code], test[pivot],
            cfg=dcfg, registry=registry)["bleu"])
        entry = {"bleu_to_pivot": bleu}
        ref = manifest.new_language_reference.get(code)
        if ref:
            entry["reference_language"] = ref
            entry["reference_bleu"] = systems["denoising"]["zz_to_pivot"][ref]
        new_language[code] = entry
        _log(f"[bench] new language {code}->{pivot}: {bleu:.2f}")

    composition = None
    if manifest.composition_pair:
        a, b = manifest.composition_pair
        reg = den_binder["registry"]
        bleu = _r(evaluate_direction(
            den_model, vocab, a, b, test[a], test[b], cfg=dcfg, registry=reg)["bleu"])
        refs = [vocab.decode(r) for r in test[b]]
        chance = _r(corpus_bleu(
            _random_cipher_hyps(manifest, vocab, test[a], a, b), refs).score)
        composition = {"pair": [a, b], "bleu": bleu, "random_cipher_baseline": chance}
        _log(f"[bench] composition {a}->{b}: {bleu:.2f} (chance {chance:.2f})")

    _, den_meta, _ = loaded["denoising"]
    report = {
        "name": manifest.name,
        "manifest_fingerprint": manifest.fingerprint(),
        "pivot": pivot,
        "unsupervised": [l.code for l in manifest.unsupervised(in_pretrain=True)],
        "decode": dict(manifest.decode),
        "systems": systems,
        "backtranslation": backtranslation,
        "new_language": new_language,
        "composition": composition,
        "stage2_validation": {
            "best_score": _r(den_meta.get("best_score") or 0.0),
            "best_update": den_meta.get("best_update"),
        },
    }
    os.makedirs(ws.path("reports"), exist_ok=True)
    atomic_write_text(report_path, json_canonical(report) + "\n")
    _write_stamp(stamp, inputs, [report_path])
    timings["eval.report"] = round(time.monotonic() - t_eval, 3)
    _merge_timings(ws, timings)
    return {"path": report_path, "skipped": False, "seconds": sum(timings.values())}


def _merge_timings(ws, timings):
    """Keep one cumulative timing ledger; phases that re-ran overwrite
    their old entry, skipped phases keep the cost of their real run."""
    p = ws.path("reports", "timings.json")
    merged = {}
    try:
        with open(p, encoding="utf-8") as f:
            merged = json.load(f)
    except (OSError, json.JSONDecodeError):
        pass
    merged.update(timings)
    merged["total"] = round(sum(v for k, v in merged.items() if k != "total"), 3)
    os.makedirs(ws.path("reports"), exist_ok=True)
    atomic_write_text(p, json_canonical(merged) + "\n")
