"""Decoding with composed adapters: batched greedy and beam search.

Both searches run on the incremental numpy path.  Beam keeps a
fairseq-style frontier (top-2k candidates, k survivors) and a finished
pool; the greedy hypothesis is always added to the pool, so at
length_penalty 0 the returned model score can never fall below
greedy's.  beam_size=1 runs the greedy path outright, making the
equivalence exact by construction.  Scores are log-probabilities under
the suppressed-and-renormalized distribution (pad/mask/tag tokens are
never emitted).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .adapters import compose
from .corpus import EOS
from .errors import ConfigError, DataError
from .utils import thread_count

SUPPRESS = -1e30


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.0
    max_len_factor: float = 2.0
    max_len_extra: int = 10
    greedy: bool = False
    chunk_size: int = 32

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.length_penalty < 0:
            raise ConfigError(f"length_penalty must be >= 0, got {self.length_penalty}")
        if self.max_len_factor < 0 or self.max_len_extra < 1:
            raise ConfigError("max length rule must allow at least one token")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")


@dataclass
class Translation:
    """One decoded sentence: content token ids, no tags or specials."""

    tokens: np.ndarray
    score: float = 0.0
    raw_score: float = 0.0
    truncated: bool = False
    error: str | None = None


def suppressed_ids(vocab):
    """Ids never emitted: pad, mask, and every language tag (eos stays)."""
    return np.array(
        [i for i, t in enumerate(vocab.tokens) if t.startswith("<") and t != EOS],
        dtype=np.int64,
    )


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _norm_score(raw, length, alpha):
    return raw / max(length, 1) ** alpha


def _src_rows(vocab, sentences, src_lang):
    eos, stag, pad = vocab.eos_id, vocab.tag_id(src_lang), vocab.pad_id
    width = max(len(s) for s in sentences) + 2
    src = np.full((len(sentences), width), pad, dtype=np.int64)
    mask = np.zeros((len(sentences), width), dtype=bool)
    for i, s in enumerate(sentences):
        row = list(map(int, s)) + [eos, stag]
        src[i, : len(row)] = row
        mask[i, : len(row)] = True
    return src, mask


def _max_lens(model, cfg, sentences):
    cap = model.cfg.max_positions - 1  # position 0 is the start tag
    return np.array(
        [
            max(1, min(int(cfg.max_len_factor * len(s)) + cfg.max_len_extra, cap))
            for s in sentences
        ],
        dtype=np.int64,
    )


def _greedy_pass(model, vocab, enc, mask, selection, tgt_tag, max_lens):
    """One hypothesis per row; ties go to the lowest token id."""
    b = enc.shape[0]
    eos = vocab.eos_id
    sup = suppressed_ids(vocab)
    state = model.start_decode(enc, mask, selection)
    tokens = np.full(b, tgt_tag, dtype=np.int64)
    out = [[] for _ in range(b)]
    raw = np.zeros(b)
    alive = np.ones(b, dtype=bool)
    truncated = np.zeros(b, dtype=bool)
    for _ in range(int(max_lens.max())):
        logits = model.step_decode(state, tokens)
        logits[:, sup] = SUPPRESS
        logp = _log_softmax(logits)
        choice = logp.argmax(axis=1)
        for i in np.flatnonzero(alive):
            out[i].append(int(choice[i]))
            raw[i] += float(logp[i, choice[i]])
            if choice[i] == eos:
                alive[i] = False
            elif len(out[i]) >= max_lens[i]:
                alive[i] = False
                truncated[i] = True
        if not alive.any():
            break
        tokens = choice
    return [(out[i], raw[i], bool(truncated[i])) for i in range(b)]


def _beam_pass(model, vocab, enc, mask, selection, tgt_tag, max_lens, k):
    """Per-sentence finished pools [(tokens, raw_score, truncated)]."""
    b, _, _ = enc.shape
    v = model.cfg.vocab_size
    eos = vocab.eos_id
    sup = suppressed_ids(vocab)
    state = model.start_decode(
        np.repeat(enc, k, axis=0), np.repeat(mask, k, axis=0), selection
    )
    tokens = np.full(b * k, tgt_tag, dtype=np.int64)
    cum = np.full((b, k), -np.inf)
    cum[:, 0] = 0.0
    hyps = [[[] for _ in range(k)] for _ in range(b)]
    pools = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for step in range(int(max_lens.max())):
        logits = model.step_decode(state, tokens)
        logits[:, sup] = SUPPRESS
        cand = cum[:, :, None] + _log_softmax(logits).reshape(b, k, v)
        reorder = np.arange(b * k)
        new_tokens = tokens.copy()
        for i in range(b):
            if done[i]:
                continue
            flat = cand[i].ravel()
            order = np.lexsort((np.arange(k * v), -flat))[: 2 * k]
            frontier = []
            for c in order:
                row, tok = divmod(int(c), v)
                if tok == eos:
                    if len(pools[i]) < k:
                        pools[i].append((hyps[i][row] + [eos], float(flat[c]), False))
                elif len(frontier) < k:
                    frontier.append((row, tok, float(flat[c])))
                if len(pools[i]) >= k:
                    break
            at_cap = step + 1 >= max_lens[i]
            if len(pools[i]) >= k or at_cap or not frontier:
                if not pools[i]:
                    row, tok, sc = frontier[0]
                    pools[i].append((hyps[i][row] + [tok], sc, True))
                done[i] = True
                continue
            hyps[i] = [hyps[i][row] + [tok] for row, tok, _ in frontier]
            for slot, (row, tok, sc) in enumerate(frontier):
                reorder[i * k + slot] = i * k + row
                new_tokens[i * k + slot] = tok
                cum[i, slot] = sc
            for slot in range(len(frontier), k):
                cum[i, slot] = -np.inf
        if done.all():
            break
        state.reorder(reorder)
        tokens = new_tokens
    return pools


def _pick(pool, alpha):
    """Best finished hypothesis by normalized score; truncated only as
    a last resort.  Stable, so earlier pool entries win exact ties."""
    finished = [h for h in pool if not h[2]]
    candidates = finished if finished else pool
    best = max(
        enumerate(candidates),
        key=lambda e: (_norm_score(e[1][1], len(e[1][0]), alpha), -e[0]),
    )[1]
    return best


def _decode_chunk(model, vocab, selection, sentences, tgt_lang, cfg):
    src, mask = _src_rows(vocab, sentences, selection.source_language.code)
    with nc.no_grad():
        enc = model.encode(src, mask, selection)
    tgt_tag = vocab.tag_id(tgt_lang)
    max_lens = _max_lens(model, cfg, sentences)
    greedy = _greedy_pass(model, vocab, enc.data, mask, selection, tgt_tag, max_lens)
    if cfg.greedy or cfg.beam_size == 1:
        pools = [[g] for g in greedy]
    else:
        pools = _beam_pass(
            model, vocab, enc.data, mask, selection, tgt_tag, max_lens, cfg.beam_size
        )
        for pool, g in zip(pools, greedy):
            pool.append(g)
    out = []
    for pool in pools:
        toks, raw, trunc = _pick(pool, cfg.length_penalty)
        content = np.array([t for t in toks if t != vocab.eos_id], dtype=np.int64)
        out.append(
            Translation(
                tokens=content,
                score=_norm_score(raw, len(toks), cfg.length_penalty),
                raw_score=raw,
                truncated=trunc,
            )
        )
    return out


def translate_corpus(model, registry, src_lang, tgt_lang, sentences, cfg=None,
                     parallelism=None, vocab=None, selection=None):
    """Order-preserving corpus decode.

    Work is split into deterministic length-sorted chunks, so the
    result does not depend on the worker count.  Per-sentence failures
    come back as Translation.error entries instead of raising.

    Adapters come from composing the direction out of the registry; an
    explicit selection overrides that, and registry=None with no
    selection decodes with the bare model.
    """
    if vocab is None:
        raise ConfigError("translate_corpus requires the vocabulary")
    cfg = cfg or DecodeConfig()
    if selection is None and registry is not None:
        selection = compose(registry, src_lang, tgt_lang)
    results = [None] * len(sentences)
    limit = model.cfg.max_positions - 2  # room for eos + language tag
    todo = []
    for i, s in enumerate(sentences):
        if len(s) > limit:
            results[i] = Translation(
                tokens=np.array([], dtype=np.int64),
                error=f"source length {len(s)} exceeds positions budget {limit}",
            )
        else:
            todo.append(i)
    order = sorted(todo, key=lambda i: (len(sentences[i]), i))
    chunks = [order[o : o + cfg.chunk_size] for o in range(0, len(order), cfg.chunk_size)]

    def run(chunk):
        sents = [sentences[i] for i in chunk]
        try:
            return _decode_chunk(model, vocab, selection, sents, tgt_lang, cfg)
        except Exception as e:  # isolate the failing sentence
            singles = []
            for s in sents:
                try:
                    singles.append(_decode_chunk(model, vocab, selection, [s], tgt_lang, cfg)[0])
                except Exception as inner:
                    singles.append(
                        Translation(tokens=np.array([], dtype=np.int64), error=str(inner))
                    )
            return singles

    workers = thread_count() if parallelism is None else max(1, parallelism)
    if workers == 1 or len(chunks) <= 1:
        done = map(run, chunks)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            done = pool.map(run, chunks)
    for chunk, translated in zip(chunks, done):
        for i, t in zip(chunk, translated):
            results[i] = t
    return results


def translate(model, registry, src_lang, tgt_lang, sentence, cfg=None, vocab=None):
    """Single-sentence decode; see translate_corpus."""
    out = translate_corpus(
        model, registry, src_lang, tgt_lang, [np.asarray(sentence)], cfg, 1, vocab
    )[0]
    if out.error:
        raise DataError(out.error)
    return out
