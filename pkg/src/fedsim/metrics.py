"""Lexical report-generation metrics: ROUGE-1..4, ROUGE-L and corpus BLEU.

Configuration is fixed and deliberately simple: lowercase, no stemming,
sentence-level ROUGE macro-averaged over pairs, corpus-level BLEU with
add-one smoothing for empty higher-order n-gram matches. Any ratio with a
zero denominator is 0.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from fedsim.errors import EmptyInputError

METRIC_COLUMNS = ("rouge1_f1", "rouge2_f1", "rouge3_f1", "rouge4_f1", "rougeL_f1", "bleu")


def _strip_non_alnum(token: str) -> str:
    start, end = 0, len(token)
    while start < end and not token[start].isalnum():
        start += 1
    while end > start and not token[end - 1].isalnum():
        end -= 1
    return token[start:end]


def tokenize(text: str) -> list[str]:
    tokens = (_strip_non_alnum(t) for t in text.lower().split())
    return [t for t in tokens if t]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def rouge_n(candidate: Sequence, reference: Sequence, n: int) -> tuple[float, float, float]:
    if n < 1:
        raise ValueError("n must be >= 1")
    cand, ref = ngrams(candidate, n), ngrams(reference, n)
    overlap = sum((cand & ref).values())
    p = _ratio(overlap, sum(cand.values()))
    r = _ratio(overlap, sum(ref.values()))
    return p, r, _f1(p, r)


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> tuple[float, float, float]:
    lcs = lcs_length(candidate, reference)
    p = _ratio(lcs, len(candidate))
    r = _ratio(lcs, len(reference))
    return p, r, _f1(p, r)


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU with one reference per candidate.

    Clipped n-gram matches and candidate n-gram totals are pooled over the
    corpus. For orders n >= 2 a zero match count is smoothed to
    ``1 / (total + 1)``; an empty unigram match yields 0.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = ngrams(cand, n), ngrams(ref, n)
            matches[n - 1] += sum((c & r).values())
            totals[n - 1] += sum(c.values())
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        m, t = matches[n - 1], totals[n - 1]
        if n >= 2 and m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / max_n)


def pair_scores(candidate: Sequence, reference: Sequence, max_n: int = 4) -> dict:
    out = {f"rouge{n}_f1": rouge_n(candidate, reference, n)[2] for n in range(1, 5)}
    out["rougeL_f1"] = rouge_l(candidate, reference)[2]
    out["bleu"] = bleu([candidate], [reference], max_n)
    return out


@dataclass
class MetricReport:
    corpus: dict
    pairs: list
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"corpus": self.corpus, "pairs": self.pairs, "settings": self.settings}


def evaluate_corpus(pairs: Sequence[tuple[Sequence, Sequence]], max_n: int = 4) -> MetricReport:
    """ROUGE macro-averaged over pairs, BLEU pooled over the whole corpus."""
    if not pairs:
        raise EmptyInputError("no (candidate, reference) pairs to evaluate")
    per_pair = [pair_scores(c, r, max_n) for c, r in pairs]
    corpus = {k: math.fsum(p[k] for p in per_pair) / len(per_pair) for k in METRIC_COLUMNS[:5]}
    corpus["bleu"] = bleu([c for c, _ in pairs], [r for _, r in pairs], max_n)
    settings = {
        "lowercase": True,
        "stemming": False,
        "rouge_averaging": "macro",
        "bleu_level": "corpus",
        "bleu_max_n": max_n,
        "bleu_smoothing": "add-one on zero matches for n >= 2",
    }
    return MetricReport(corpus, per_pair, settings)


def write_metrics_csv(path, rows: Sequence[tuple[str, dict]], extra_columns: Sequence[str] = ()) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["approach", *METRIC_COLUMNS, *extra_columns])
        for name, values in rows:
            w.writerow([name] + [repr(float(values[c])) for c in (*METRIC_COLUMNS, *extra_columns)])


def write_metrics_json(path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
