"""Span-mask corruption for denoising training.

Implements the corruption g applied to monolingual sentences: contiguous
spans with Poisson-sampled lengths are replaced by a single mask token
(text infilling), and occasionally by a single random vocabulary token.
Corruption applies to content tokens only; callers attach language tags
and end-of-sentence markers afterwards.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .utils import derive_rng

# resampling this often means the sampler is stuck, not unlucky
_MAX_REJECTS = 10_000


@dataclass
class NoiseSpec:
    """Parameters of the corruption function g."""

    mask_token_id: int
    mask_ratio: float = 0.3
    poisson_lambda: float = 3.5
    random_replace_ratio: float = 0.1
    # ids eligible when a span is realized as a random token; required
    # whenever random_replace_ratio > 0
    random_pool: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio out of [0,1]: {self.mask_ratio}")
        if self.poisson_lambda <= 0:
            raise ConfigError(f"poisson_lambda must be > 0: {self.poisson_lambda}")
        if not 0.0 <= self.random_replace_ratio <= 1.0:
            raise ConfigError(
                f"random_replace_ratio out of [0,1]: {self.random_replace_ratio}"
            )
        if self.random_replace_ratio > 0 and (
            self.random_pool is None or len(self.random_pool) == 0
        ):
            raise ConfigError("random_replace_ratio > 0 needs a non-empty random_pool")
        if self.random_pool is not None:
            self.random_pool = np.asarray(self.random_pool, dtype=np.int64)


@dataclass
class NoiseStats:
    """Aggregate counters across corrupted sentences.

    drawn_length_sum counts every Poisson draw before truncation or
    rejection, so its mean is an unbiased estimate of E[max(X, 1)].
    """

    sentences: int = 0
    tokens: int = 0
    covered: int = 0
    spans: int = 0
    draws: int = 0
    drawn_length_sum: int = 0
    random_spans: int = 0
    rejected: int = 0

    @property
    def coverage(self) -> float:
        return self.covered / self.tokens if self.tokens else 0.0

    @property
    def mean_drawn_length(self) -> float:
        return self.drawn_length_sum / self.draws if self.draws else 0.0

    @property
    def random_replace_rate(self) -> float:
        return self.random_spans / self.spans if self.spans else 0.0


def poisson_span_length(lam: float, rng: np.random.Generator) -> int:
    """Poisson draw clipped below at 1 (no pure insertions)."""
    return max(int(rng.poisson(lam)), 1)


def span_mask(tokens, spec: NoiseSpec, rng: np.random.Generator, stats: NoiseStats | None = None):
    """Corrupt one sentence of content tokens.

    Samples spans until exactly floor(mask_ratio * len) positions are
    covered: the start is uniform over still-uncovered positions, the
    length is Poisson-drawn and then truncated to the remaining budget
    and the sentence end, and a proposal touching already-covered
    positions is rejected and resampled.  Each accepted span becomes a
    single mask token, or with probability random_replace_ratio a
    single random token from the pool.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[0]
    budget = int(spec.mask_ratio * n)
    if stats is not None:
        stats.sentences += 1
        stats.tokens += n
    if budget == 0:
        return tokens.copy()

    covered = np.zeros(n, dtype=bool)
    spans = []
    remaining = budget
    rejects = 0
    while remaining > 0:
        open_idx = np.flatnonzero(~covered)
        start = int(open_idx[rng.integers(open_idx.shape[0])])
        ell = poisson_span_length(spec.poisson_lambda, rng)
        if stats is not None:
            stats.draws += 1
            stats.drawn_length_sum += ell
        length = min(ell, remaining, n - start)
        if covered[start : start + length].any():
            rejects += 1
            if rejects > _MAX_REJECTS:
                raise NumericError("span sampler failed to place a span")
            continue
        covered[start : start + length] = True
        spans.append((start, length))
        remaining -= length
    if stats is not None:
        stats.covered += budget
        stats.spans += len(spans)
        stats.rejected += rejects

    spans.sort()
    out = []
    pos = 0
    for start, length in spans:
        out.extend(tokens[pos:start])
        if rng.random() < spec.random_replace_ratio:
            out.append(int(spec.random_pool[rng.integers(spec.random_pool.shape[0])]))
            if stats is not None:
                stats.random_spans += 1
        else:
            out.append(spec.mask_token_id)
        pos = start + length
    out.extend(tokens[pos:])
    return np.asarray(out, dtype=np.int64)


def corrupt_corpus(sentences, spec: NoiseSpec, seed: int | None = None):
    """Corrupt a list of sentences with per-sentence derived seeds.

    Each sentence gets its own rng keyed by (seed, index), so the result
    for sentence i does not depend on how many sentences precede it or
    on processing order.
    """
    if seed is None:
        seed = spec.seed
    if seed is None:
        raise ConfigError("corrupt_corpus needs a seed (argument or NoiseSpec.seed)")
    stats = NoiseStats()
    out = []
    for i, sent in enumerate(sentences):
        rng = derive_rng(seed, "noise", i)
        out.append(span_mask(sent, spec, rng, stats))
    return out, stats
