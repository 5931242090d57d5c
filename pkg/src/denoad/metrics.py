"""Corpus BLEU and chrF, plus the benchmark grid report.

Both metrics operate on whitespace-tokenized strings with no case
folding, matching the BLEU+c.mixed+s.exp+tok.none signature.  Scores
are on the 0-100 scale.
"""

import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError
from .utils import json_canonical

_BLEU_ORDER = 4
_LOG_ZERO = -9999999999.0


@dataclass
class BleuReport:
    score: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_lengths(hyps, refs):
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise DataError("empty evaluation set")


def corpus_bleu(hyps, refs) -> BleuReport:
    """Corpus BLEU-4 with brevity penalty and exponential smoothing.

    Orders with zero matches get 100/(2^k * total) where k counts the
    zero orders so far; an order with no hypothesis n-grams at all
    leaves its precision at zero, which drives the score to zero.
    """
    _check_lengths(hyps, refs)
    correct = [0] * _BLEU_ORDER
    total = [0] * _BLEU_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, _BLEU_ORDER + 1):
            hn = _ngrams(h, n)
            if not hn:
                continue
            rn = _ngrams(r, n)
            total[n - 1] += sum(hn.values())
            correct[n - 1] += sum((hn & rn).values())

    precisions = [0.0] * _BLEU_ORDER
    smooth = 1.0
    for n in range(1, _BLEU_ORDER + 1):
        if total[n - 1] == 0:
            break
        if correct[n - 1] == 0:
            smooth *= 2.0
            precisions[n - 1] = 100.0 / (smooth * total[n - 1])
        else:
            precisions[n - 1] = 100.0 * correct[n - 1] / total[n - 1]

    if hyp_len >= ref_len:
        bp = 1.0
    elif hyp_len == 0:
        bp = 0.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    logs = [math.log(p) if p > 0.0 else _LOG_ZERO for p in precisions]
    score = bp * math.exp(sum(logs) / _BLEU_ORDER)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def chrf(hyps, refs, char_n=6, beta=2.0) -> float:
    """Character n-gram F-beta, n averaged 1..char_n, whitespace kept.

    Precision and recall are corpus totals per order, averaged over the
    orders where both sides produced n-grams, then combined as F-beta.
    """
    _check_lengths(hyps, refs)
    hyp_tot = [0] * char_n
    ref_tot = [0] * char_n
    match = [0] * char_n
    for hyp, ref in zip(hyps, refs):
        for n in range(1, char_n + 1):
            hn = Counter(hyp[i : i + n] for i in range(len(hyp) - n + 1))
            rn = Counter(ref[i : i + n] for i in range(len(ref) - n + 1))
            hyp_tot[n - 1] += sum(hn.values())
            ref_tot[n - 1] += sum(rn.values())
            match[n - 1] += sum((hn & rn).values())

    prec = rec = 0.0
    effective = 0
    for n in range(char_n):
        if hyp_tot[n] > 0 and ref_tot[n] > 0:
            prec += match[n] / hyp_tot[n]
            rec += match[n] / ref_tot[n]
            effective += 1
    if effective == 0:
        return 0.0
    prec /= effective
    rec /= effective
    if prec + rec == 0.0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * prec * rec / (b2 * prec + rec)


# --- benchmark report ---


@dataclass
class BenchReport:
    """Per-direction grids of scores: rows = systems, columns = languages."""

    results: dict
    languages: list
    systems: list
    directions: list

    def cell(self, system, direction, language):
        return self.results.get((system, direction, language))

    def row_avg(self, system, direction):
        vals = [
            self.cell(system, direction, lang)
            for lang in self.languages
            if self.cell(system, direction, lang) is not None
        ]
        return sum(vals) / len(vals) if vals else None

    def text_table(self) -> str:
        name_w = max([len(s) for s in self.systems] + [6])
        col_w = max([len(l) for l in self.languages] + [6]) + 1
        lines = []
        for direction in self.directions:
            lines.append(direction)
            header = " " * name_w + "".join(
                f"{lang:>{col_w}}" for lang in self.languages
            ) + f"{'avg':>{col_w}}"
            lines.append(header)
            for system in self.systems:
                cells = []
                for lang in self.languages:
                    v = self.cell(system, direction, lang)
                    cells.append("-" if v is None else f"{v:.2f}")
                avg = self.row_avg(system, direction)
                cells.append("-" if avg is None else f"{avg:.2f}")
                lines.append(
                    f"{system:<{name_w}}" + "".join(f"{c:>{col_w}}" for c in cells)
                )
            lines.append("")
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {}
        for direction in self.directions:
            block = {}
            for system in self.systems:
                row = {}
                for lang in self.languages:
                    v = self.cell(system, direction, lang)
                    row[lang] = None if v is None else round(v, 4)
                avg = self.row_avg(system, direction)
                row["avg"] = None if avg is None else round(avg, 4)
                block[system] = row
            payload[direction] = block
        return json_canonical(
            {
                "directions": self.directions,
                "languages": self.languages,
                "systems": self.systems,
                "grid": payload,
            }
        )


def benchmark_report(results, languages, systems, directions=None) -> BenchReport:
    """Arrange (system, direction, language) -> score into a report.

    Column order follows the caller's declared language order; unknown
    keys in results are rejected rather than silently dropped.
    """
    if directions is None:
        directions = sorted({d for (_, d, _) in results})
    known = set()
    for (system, direction, lang) in results:
        if system not in systems or lang not in languages or direction not in directions:
            raise DataError(
                f"result key ({system}, {direction}, {lang}) outside declared axes"
            )
        known.add((system, direction, lang))
    return BenchReport(dict(results), list(languages), list(systems), list(directions))
