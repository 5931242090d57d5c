"""Synthetic multilingual corpora, vocabulary, and batching.

The desk-scale stand-in for a natural multilingual setup: a Zipf-Markov
proto language, per-language vocabulary-bijection ciphers (optionally
with local reordering), a shared trimmable vocabulary with language
tags, and temperature-sampled, length-bucketed, language-tagged
batches.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .noising import NoiseSpec, span_mask

PAD, MASK, EOS = "<pad>", "<mask>", "</s>"

ROLES = ("pivot", "auxiliary", "unsupervised")


@dataclass(frozen=True)
class LanguageId:
    code: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown language role '{self.role}'")
        if not self.code or any(c.isspace() for c in self.code):
            raise ConfigError(f"bad language code '{self.code}'")


def validate_languages(langs):
    """Codes unique, exactly one pivot."""
    codes = [l.code for l in langs]
    if len(set(codes)) != len(codes):
        raise ConfigError(f"duplicate language codes in {codes}")
    pivots = [l for l in langs if l.role == "pivot"]
    if len(pivots) != 1:
        raise ConfigError(f"need exactly one pivot language, got {len(pivots)}")
    return pivots[0]


# --- vocabulary ---


class Vocab:
    """Token strings <-> dense ids; specials first, then language tags,
    then content tokens."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        for i, t in enumerate((PAD, MASK, EOS)):
            if self.index.get(t) != i:
                raise ConfigError(f"special {t!r} must sit at id {i}")
        self.pad_id, self.mask_id, self.eos_id = 0, 1, 2

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def build(cls, language_codes, content_tokens):
        tags = [f"<{c}>" for c in language_codes]
        return cls([PAD, MASK, EOS] + tags + list(content_tokens))

    def tag_id(self, code):
        tid = self.index.get(f"<{code}>")
        if tid is None:
            raise ConfigError(f"no tag token for language '{code}'")
        return tid

    @property
    def special_ids(self):
        return [i for i, t in enumerate(self.tokens) if t.startswith("<") or t == EOS]

    @property
    def content_ids(self):
        specials = set(self.special_ids)
        return np.array([i for i in range(len(self.tokens)) if i not in specials])

    def encode(self, line):
        ids = []
        for tok in line.split():
            i = self.index.get(tok)
            if i is None:
                raise DataError(f"token {tok!r} not in vocabulary")
            ids.append(i)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids):
        return " ".join(self.tokens[int(i)] for i in ids)

    def save(self, path):
        from .utils import atomic_write_text

        atomic_write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def surface_token(surface_id: int) -> str:
    return f"w{surface_id}"


# --- proto-language generation ---


def markov_successor(vocab_size: int, seed: int) -> np.ndarray:
    """A single-cycle successor permutation over proto ids.

    One long cycle keeps the bigram graph free of nontrivial
    frequency-preserving automorphisms, so a cipher over it stays
    identifiable from monolingual statistics.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1C1E)))
    order = rng.permutation(vocab_size)
    succ = np.empty(vocab_size, dtype=np.int64)
    succ[order] = np.roll(order, -1)
    return succ


def gen_proto_corpus(
    vocab_size,
    n_sentences,
    zipf_exponent,
    len_range,
    seed,
    markov_weight=0.3,
):
    """Sentences of proto ids: Zipfian unigrams plus successor bigrams.

    Each position either follows the successor permutation of the
    previous token (probability markov_weight) or is a fresh Zipf draw.
    A permutation maps the Zipf marginal onto itself only in aggregate,
    so unigram frequencies stay Zipf-shaped (exactly uniform at
    exponent 0).
    """
    if vocab_size < 50:
        raise ConfigError(f"proto vocab too small: {vocab_size}")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise ConfigError(f"bad length range {len_range}")
    if not 0.0 <= markov_weight < 1.0:
        raise ConfigError(f"markov_weight out of [0,1): {markov_weight}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9701)))
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    probs = ranks**-zipf_exponent
    probs /= probs.sum()
    succ = markov_successor(vocab_size, seed)

    lengths = rng.integers(lo, hi + 1, size=n_sentences)
    maxlen = int(lengths.max())
    grid = np.empty((n_sentences, maxlen), dtype=np.int64)
    grid[:, 0] = rng.choice(vocab_size, size=n_sentences, p=probs)
    for t in range(1, maxlen):
        fresh = rng.choice(vocab_size, size=n_sentences, p=probs)
        follow = rng.random(n_sentences) < markov_weight
        grid[:, t] = np.where(follow, succ[grid[:, t - 1]], fresh)
    return [grid[i, : lengths[i]].copy() for i in range(n_sentences)]


# --- language rendering ---


@dataclass
class LanguageProfile:
    """How one language realizes proto sentences on the surface.

    mapping[p] is the surface id of proto id p; images of different
    profiles may overlap or be disjoint.  reorder_period k swaps
    adjacent tokens at positions (0,1), (k,k+1), ... after mapping;
    the swap pattern is its own inverse.
    """

    id: LanguageId
    mapping: np.ndarray
    reorder_period: int = 0
    seed: int = 0

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        if len(np.unique(self.mapping)) != self.mapping.shape[0]:
            raise ConfigError(f"mapping for '{self.id.code}' is not injective")
        if self.reorder_period == 1 or self.reorder_period < 0:
            raise ConfigError("reorder_period must be 0 or >= 2")
        inv = {int(s): p for p, s in enumerate(self.mapping)}
        self._inverse = inv


def cipher_profile(lang: LanguageId, n_proto: int, block_offset: int, seed: int, reorder_period: int = 0, identity: bool = False):
    """Bijection from proto ids into the surface block starting at block_offset."""
    if identity:
        perm = np.arange(n_proto)
    else:
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB11)))
        perm = rng.permutation(n_proto)
    return LanguageProfile(
        id=lang,
        mapping=block_offset + perm,
        reorder_period=reorder_period,
        seed=seed,
    )


def _apply_reorder(tokens: np.ndarray, period: int) -> np.ndarray:
    if period == 0:
        return tokens
    out = tokens.copy()
    for j in range(0, out.shape[0] - 1, period):
        out[j], out[j + 1] = out[j + 1], out[j]
    return out


def render_language(proto_sentence, profile: LanguageProfile) -> np.ndarray:
    """Map proto ids through the language bijection, then reorder."""
    proto_sentence = np.asarray(proto_sentence, dtype=np.int64)
    if proto_sentence.size and (
        proto_sentence.min() < 0 or proto_sentence.max() >= profile.mapping.shape[0]
    ):
        raise DataError(
            f"proto id out of domain for language '{profile.id.code}'"
        )
    return _apply_reorder(profile.mapping[proto_sentence], profile.reorder_period)


def inverse_render(sentence, profile: LanguageProfile) -> np.ndarray:
    """Undo render_language; errors on tokens outside the language image."""
    sentence = np.asarray(sentence, dtype=np.int64)
    unordered = _apply_reorder(sentence, profile.reorder_period)
    try:
        return np.asarray([profile._inverse[int(t)] for t in unordered], dtype=np.int64)
    except KeyError as e:
        raise DataError(
            f"surface id {e.args[0]} outside language '{profile.id.code}'"
        ) from None


# --- trimming ---


def trim_vocab(full_vocab: Vocab, corpora):
    """Drop content tokens no corpus uses; keep specials and tags.

    corpora is an iterable of sentences of ids under full_vocab.
    Returns the trimmed Vocab and an old->new id map (-1 = dropped).
    """
    used = np.zeros(len(full_vocab), dtype=bool)
    for sent in corpora:
        used[np.asarray(sent, dtype=np.int64)] = True
    for sid in full_vocab.special_ids:
        used[sid] = True
    used[full_vocab.pad_id] = True
    keep = np.flatnonzero(used)
    id_map = np.full(len(full_vocab), -1, dtype=np.int64)
    id_map[keep] = np.arange(keep.shape[0])
    trimmed = Vocab([full_vocab.tokens[int(i)] for i in keep])
    return trimmed, id_map


def apply_id_map(sentences, id_map):
    out = []
    for sent in sentences:
        mapped = id_map[np.asarray(sent, dtype=np.int64)]
        if (mapped < 0).any():
            raise DataError("sentence uses a token dropped by trimming")
        out.append(mapped)
    return out


# --- sampling ---


@dataclass
class SamplingSpec:
    """Temperature-based multilingual sampling over corpus sizes."""

    sizes: dict
    temperature: float = 5.0

    def __post_init__(self):
        if self.temperature < 1.0:
            raise ConfigError(f"temperature must be >= 1, got {self.temperature}")
        if not self.sizes:
            raise ConfigError("SamplingSpec needs at least one corpus size")
        for k, n in self.sizes.items():
            if n <= 0:
                raise ConfigError(f"corpus size for {k!r} must be > 0, got {n}")


def temperature_probs(spec: SamplingSpec) -> dict:
    keys = list(spec.sizes.keys())
    n = np.array([spec.sizes[k] for k in keys], dtype=np.float64)
    w = n ** (1.0 / spec.temperature)
    w /= w.sum()
    return dict(zip(keys, w))


# --- batching ---


@dataclass
class PairData:
    """One batching stream: a parallel pair, or a denoising stream when
    src_lang == tgt_lang and noise is set (sources are corrupted at
    sampling time)."""

    src_lang: str
    tgt_lang: str
    src: list
    tgt: list
    noise: NoiseSpec | None = None

    @property
    def key(self):
        return f"{self.src_lang}-{self.tgt_lang}"

    def __len__(self):
        return len(self.tgt)


@dataclass
class PairedBatch:
    src_lang: str
    tgt_lang: str
    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    labels: np.ndarray

    @property
    def ntokens(self):
        return int(self.labels.size)

    @property
    def real_target_tokens(self):
        return int((self.labels != 0).sum())


def encode_rows(vocab: Vocab, src_contents, tgt_contents, src_lang, tgt_lang):
    """Assemble padded tag-convention rows.

    Source rows end with </s> and the source-language tag; decoder
    input starts with the target-language tag; labels end with </s>.
    """
    pad = vocab.pad_id
    eos = vocab.eos_id
    stag = vocab.tag_id(src_lang)
    ttag = vocab.tag_id(tgt_lang)
    b = len(src_contents)
    s_width = max(len(s) for s in src_contents) + 2
    t_width = max(len(t) for t in tgt_contents) + 1
    src = np.full((b, s_width), pad, dtype=np.int64)
    src_mask = np.zeros((b, s_width), dtype=bool)
    tgt_in = np.full((b, t_width), pad, dtype=np.int64)
    labels = np.full((b, t_width), pad, dtype=np.int64)
    for i, (sc, tc) in enumerate(zip(src_contents, tgt_contents)):
        row = list(map(int, sc)) + [eos, stag]
        src[i, : len(row)] = row
        src_mask[i, : len(row)] = True
        ti = [ttag] + list(map(int, tc))
        tgt_in[i, : len(ti)] = ti
        lb = list(map(int, tc)) + [eos]
        labels[i, : len(lb)] = lb
    return PairedBatch(src_lang, tgt_lang, src, src_mask, tgt_in, labels)


def strip_row(row, vocab: Vocab):
    """Content tokens of a padded source/label row (tags, eos, pad removed)."""
    specials = set(vocab.special_ids) | {vocab.pad_id}
    return np.array([t for t in row if int(t) not in specials], dtype=np.int64)


class BatchSampler:
    """Temperature-sampled, length-bucketed batches under a token budget.

    The budget bounds padded target tokens per batch.  Sentences whose
    target row alone would blow the budget are dropped up front and
    counted in skipped.  All randomness comes from the rng handed to
    sample(), so one sampler serves deterministic replay from any
    update index.
    """

    def __init__(self, pairs, max_tokens, spec: SamplingSpec | None = None):
        if max_tokens < 8:
            raise ConfigError(f"max_tokens too small: {max_tokens}")
        self.max_tokens = max_tokens
        self.pairs = []
        self.skipped = 0
        self.batch_counts = {}
        for p in pairs:
            if len(p) == 0:
                raise DataError(f"empty pair data for {p.key}")
            if len(p.src) != len(p.tgt):
                raise DataError(f"src/tgt length mismatch for {p.key}")
            keep_idx = [i for i, t in enumerate(p.tgt) if len(t) + 1 <= max_tokens and len(p.src[i]) + 2 <= max_tokens]
            self.skipped += len(p.tgt) - len(keep_idx)
            if not keep_idx:
                raise DataError(f"all sentences of {p.key} exceed max_tokens")
            src = [p.src[i] for i in keep_idx]
            tgt = [p.tgt[i] for i in keep_idx]
            order = np.argsort([len(t) for t in tgt], kind="stable")
            self.pairs.append(
                PairData(p.src_lang, p.tgt_lang,
                         [src[i] for i in order], [tgt[i] for i in order], p.noise)
            )
            self.batch_counts[p.key] = 0
        if spec is None:
            spec = SamplingSpec(sizes={p.key: len(p) for p in self.pairs})
        probs = temperature_probs(spec)
        try:
            self._probs = np.array([probs[p.key] for p in self.pairs])
        except KeyError as e:
            raise ConfigError(f"SamplingSpec missing size for pair {e.args[0]}") from None
        self._probs = self._probs / self._probs.sum()

    def sample(self, rng: np.random.Generator, vocab: Vocab) -> PairedBatch:
        pick = int(rng.choice(len(self.pairs), p=self._probs))
        pair = self.pairs[pick]
        n = len(pair)
        start = int(rng.integers(n))
        width = len(pair.tgt[start]) + 1
        end = start + 1
        while end < n:
            w = max(width, len(pair.tgt[end]) + 1)
            if (end - start + 1) * w > self.max_tokens:
                break
            width = w
            end += 1
        tgt = pair.tgt[start:end]
        if pair.noise is not None:
            src = [span_mask(s, pair.noise, rng) for s in pair.src[start:end]]
        else:
            src = pair.src[start:end]
        self.batch_counts[pair.key] = self.batch_counts[pair.key] + 1
        return encode_rows(vocab, src, tgt, pair.src_lang, pair.tgt_lang)


def build_batches(pairs, max_tokens, rng, spec, vocab):
    """Endless stream of batches from a BatchSampler."""
    sampler = BatchSampler(pairs, max_tokens, spec)
    while True:
        yield sampler.sample(rng, vocab)


# --- corpus files ---


def save_corpus(path, sentences, vocab: Vocab):
    from .utils import atomic_write_text

    lines = [vocab.decode(s) for s in sentences]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_corpus(path, vocab: Vocab):
    try:
        with open(path, encoding="utf-8") as f:
            raw = [line.strip() for line in f]
    except OSError as e:
        raise DataError(f"cannot read corpus {path}: {e}") from None
    sents = [vocab.encode(line) for line in raw if line]
    if not sents:
        raise DataError(f"corpus {path} is empty")
    return sents
