"""Corpus-level multi-reference captioning metrics.

All metrics consume pre-tokenized hypotheses and references exactly as given
(no re-tokenization, no lowercasing — the token arrays are the unit of
comparison, which matters for Mandarin captions).

Conventions pinned here:
  * BLEU is corpus-level cumulative BLEU: clipped modified n-gram precisions
    aggregated over the whole corpus, geometric mean with uniform weights,
    closest-reference brevity penalty (ties resolve to the shorter length),
    no smoothing.
  * ROUGE-L takes the max F-measure over references per item (beta = 1.2)
    and averages over items.
  * CIDEr uses n = 1..4 TF-IDF n-gram vectors with idf = log(M / df), df
    clamped to >= 1 and counted over items' reference sets, plain cosine
    similarity, a Gaussian length penalty exp(-(|hyp|-|ref|)^2 / (2*6^2)),
    and the conventional x10 scale (disable with scale=1).
  * Richness is the fraction of unique predicted sentences.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

CIDER_MAX_N = 4
CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


class EmptyCorpus(ValueError):
    pass


class EmptyList(ValueError):
    pass


@dataclass(frozen=True)
class EvalItem:
    """One clip: the predicted token sequence plus >= 1 reference sequences."""

    audio_id: str
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"item '{self.audio_id}' has no references")


@dataclass(frozen=True)
class EvalCorpus:
    items: tuple[EvalItem, ...]

    def __post_init__(self):
        ids = [it.audio_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("audio_ids must be unique within an evaluation corpus")


@dataclass(frozen=True)
class ScoreReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    cider: float
    richness: float


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(corpus: EvalCorpus, max_n: int) -> float:
    """Corpus-level cumulative BLEU over orders 1..max_n.

    Precisions are clipped against the per-item maximum reference counts and
    pooled over the corpus before the geometric mean; any zero precision makes
    the score 0 (no smoothing).
    """
    if not 1 <= max_n <= 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if not corpus.items:
        raise EmptyCorpus("BLEU needs at least one item")

    clipped = [0] * max_n
    total = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for item in corpus.items:
        h = item.hypothesis
        hyp_len += len(h)
        # Closest reference length; ties go to the shorter reference.
        ref_len += min((abs(len(r) - len(h)), len(r)) for r in item.references)[1]
        for n in range(1, max_n + 1):
            hyp_counts = _ngram_counts(h, n)
            max_ref: dict = {}
            for ref in item.references:
                for gram, count in _ngram_counts(ref, n).items():
                    if count > max_ref.get(gram, 0):
                        max_ref[gram] = count
            clipped[n - 1] += sum(min(c, max_ref.get(g, 0)) for g, c in hyp_counts.items())
            total[n - 1] += max(0, len(h) - n + 1)

    precisions = [clipped[i] / total[i] if total[i] > 0 else 0.0 for i in range(max_n)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / max_n
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_mean)


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[len(b)]


def rouge_l(corpus: EvalCorpus, beta: float = ROUGE_BETA) -> float:
    """Mean over items of the best LCS F-measure against any reference."""
    if not corpus.items:
        raise EmptyCorpus("ROUGE-L needs at least one item")
    scores = []
    for item in corpus.items:
        best = 0.0
        for ref in item.references:
            lcs = _lcs_len(item.hypothesis, ref)
            if lcs == 0:
                continue
            p = lcs / len(item.hypothesis)
            r = lcs / len(ref)
            f = (1 + beta * beta) * p * r / (r + beta * beta * p)
            if f > best:
                best = f
        scores.append(best)
    return sum(scores) / len(scores)


def cider(corpus: EvalCorpus, sigma: float = CIDER_SIGMA, scale: float = 10.0) -> float:
    """Consensus score from IDF-weighted n-gram cosine similarity, n = 1..4.

    Document frequency of an n-gram counts the items whose reference set
    contains it; idf = log(M / max(df, 1)). Per item and reference the cosine
    is damped by the Gaussian length penalty, averaged over references and
    then over n; the corpus score is the item mean times `scale`.
    """
    if not corpus.items:
        raise EmptyCorpus("CIDEr needs at least one item")
    m = len(corpus.items)
    df: Counter = Counter()
    for item in corpus.items:
        seen = set()
        for ref in item.references:
            for n in range(1, CIDER_MAX_N + 1):
                seen.update(_ngram_counts(ref, n).keys())
        df.update(seen)

    def tfidf_vec(tokens: Sequence[str], n: int) -> tuple[dict, float]:
        vec = {g: c * math.log(m / max(df.get(g, 0), 1))
               for g, c in _ngram_counts(tokens, n).items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        return vec, norm

    item_scores = []
    for item in corpus.items:
        hyp_vecs = [tfidf_vec(item.hypothesis, n) for n in range(1, CIDER_MAX_N + 1)]
        per_n = [0.0] * CIDER_MAX_N
        for ref in item.references:
            delta = len(item.hypothesis) - len(ref)
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            for n_idx in range(CIDER_MAX_N):
                hyp_vec, hyp_norm = hyp_vecs[n_idx]
                ref_vec, ref_norm = tfidf_vec(ref, n_idx + 1)
                if hyp_norm == 0.0 or ref_norm == 0.0:
                    continue
                dot = sum(w * ref_vec[g] for g, w in hyp_vec.items() if g in ref_vec)
                per_n[n_idx] += penalty * dot / (hyp_norm * ref_norm)
        score_n = [s / len(item.references) for s in per_n]
        item_scores.append(scale * sum(score_n) / CIDER_MAX_N)
    return sum(item_scores) / len(item_scores)


def richness(hypotheses: Sequence[Sequence[str]]) -> float:
    """|unique predicted sentences| / |predictions|."""
    if not hypotheses:
        raise EmptyList("richness needs at least one prediction")
    distinct = {" ".join(h) for h in hypotheses}
    return len(distinct) / len(hypotheses)


def evaluate(corpus: EvalCorpus, cider_scale: float = 10.0) -> ScoreReport:
    """All seven scores on one corpus, sharing the given tokenization."""
    return ScoreReport(
        bleu1=bleu(corpus, 1),
        bleu2=bleu(corpus, 2),
        bleu3=bleu(corpus, 3),
        bleu4=bleu(corpus, 4),
        rouge_l=rouge_l(corpus),
        cider=cider(corpus, scale=cider_scale),
        richness=richness([it.hypothesis for it in corpus.items]),
    )


def format_report(report: ScoreReport) -> str:
    """One-line JSON record with all scores at 6 decimal places."""
    fields = ("bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "richness")
    return json.dumps({k: round(getattr(report, k), 6) for k in fields})


def load_eval_corpus(path) -> EvalCorpus:
    """Read line-delimited {audio_id, hypothesis, references} records."""
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            items.append(EvalItem(
                audio_id=obj["audio_id"],
                hypothesis=tuple(obj["hypothesis"]),
                references=tuple(tuple(r) for r in obj["references"]),
            ))
    return EvalCorpus(items=tuple(items))


def save_eval_corpus(corpus: EvalCorpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in corpus.items:
            obj = {"audio_id": item.audio_id,
                   "hypothesis": list(item.hypothesis),
                   "references": [list(r) for r in item.references]}
            fh.write(json.dumps(obj, ensure_ascii=False, separators=(",", ":")) + "\n")
