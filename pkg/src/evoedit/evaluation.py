"""Multi-rank efficacy/specificity scoring with BLEU and per-token perplexity.

Candidates come from greedy decoding; BLEU-4 runs on whitespace-tokenized
lowercased strings with epsilon smoothing (1e-9) on zero clipped counts and
the usual brevity penalty. Orders longer than the candidate are dropped from
the geometric mean, otherwise no 1-3 word answer could ever score 1.0.
Perplexity is teacher-forced over the reference answer tokens only, so it is
independent of whatever the model would generate.
"""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .corpus import EditInstance, Rank, RankedQuery, RANKS, Tokenizer
from .errors import ConfigError, DataError
from .model import ModelParams, embed, forward_from_embeddings, generate_greedy

EVAL_CSV_COLUMNS = ("step", "mode", "rank", "bleu", "ppl")
_MAX_NLL = 700.0  # keeps exp() finite; reached only by a pathological model


def bleu(candidate: str, reference: str, max_order: int = 4, epsilon: float = 1e-9) -> float:
    """Sentence BLEU in [0, 1]; empty candidates score 0."""
    ref_tokens = reference.lower().split()
    if not ref_tokens:
        raise DataError("BLEU reference must be non-empty")
    cand_tokens = candidate.lower().split()
    if not cand_tokens:
        return 0.0
    log_sum = 0.0
    orders = 0
    for n in range(1, max_order + 1):
        total = len(cand_tokens) - n + 1
        if total <= 0:
            break
        cand_counts = Counter(_ngrams(cand_tokens, n))
        ref_counts = Counter(_ngrams(ref_tokens, n))
        clipped = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        precision = clipped / total if clipped > 0 else epsilon
        log_sum += math.log(precision)
        orders += 1
    score = math.exp(log_sum / orders)
    c, r = len(cand_tokens), len(ref_tokens)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * score


def _ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def answer_token_ids(tokenizer: Tokenizer, question: str, answer: str) -> tuple[list[int], list[int]]:
    """Context ids ([bos] + question) and answer ids (leading-space answer)."""
    context = [tokenizer.bos_id] + tokenizer.encode(question)
    answer_ids = tokenizer.encode(" " + answer)
    return context, answer_ids


def per_token_ppl(params: ModelParams, tokenizer: Tokenizer, question: str, answer: str) -> float:
    """exp(mean NLL of the answer tokens, conditioned on the question).

    If question+answer exceed the context window the question is truncated
    from the left (keeping the bos marker) with a warning.
    """
    context, answer_ids = answer_token_ids(tokenizer, question, answer)
    if not answer_ids:
        raise DataError("answer tokenized to zero tokens")
    max_len = params.config.max_seq_len
    if len(context) + len(answer_ids) > max_len:
        keep = max_len - len(answer_ids) - 1
        if keep < 1:
            raise DataError("answer alone exceeds the model context window")
        warnings.warn(
            f"query truncated from the left: {len(context)} -> {keep + 1} tokens",
            stacklevel=2,
        )
        context = [tokenizer.bos_id] + context[len(context) - keep:]
    full = context + answer_ids
    with ad.no_grad():
        logits = forward_from_embeddings(params, embed(params, full)).data
    start = len(context)
    rows = logits[start - 1:len(full) - 1]
    targets = np.asarray(full[start:], dtype=np.int64)
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -float(np.mean(log_probs[np.arange(len(targets)), targets]))
    return math.exp(min(nll, _MAX_NLL))


def generate_answer(params: ModelParams, tokenizer: Tokenizer, question: str, max_new: int) -> str:
    """Greedy continuation of the question, cut at the first sentence end.

    Reference answers are short phrases; a continuation that keeps reciting
    past its first sentence carries no extra information about the queried
    fact, so everything after the first terminator is dropped.
    """
    prompt = [tokenizer.bos_id] + tokenizer.encode(question)
    max_ctx = params.config.max_seq_len
    if len(prompt) >= max_ctx:
        prompt = [tokenizer.bos_id] + prompt[len(prompt) - max_ctx + 1:]
    new_ids = generate_greedy(params, prompt, max_new, eos_id=tokenizer.eos_id)
    text = tokenizer.decode(new_ids)
    text = re.split(r"[.?!]", text, maxsplit=1)[0]
    return text.strip()


@dataclass
class EvalOptions:
    specificity_coeff: float = 0.1
    max_new: int = 32

    def __post_init__(self):
        if not (0.0 < self.specificity_coeff <= 1.0):
            raise ConfigError(f"sampling coefficient must be in (0, 1], got {self.specificity_coeff}")
        if self.max_new < 0:
            raise ConfigError("max_new must be non-negative")


@dataclass
class EvalReport:
    mode: str  # "efficacy" or "specificity"
    step: int
    rank_bleu: dict[Rank, float]
    rank_ppl: dict[Rank, float]
    n_queries: int

    @property
    def average_bleu(self) -> float:
        return sum(self.rank_bleu[r] for r in RANKS) / len(RANKS)

    @property
    def average_ppl(self) -> float:
        return sum(self.rank_ppl[r] for r in RANKS) / len(RANKS)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "step": self.step,
            "rank_bleu": {r.value: self.rank_bleu[r] for r in RANKS},
            "rank_ppl": {r.value: self.rank_ppl[r] for r in RANKS},
            "average_bleu": self.average_bleu,
            "average_ppl": self.average_ppl,
            "n_queries": self.n_queries,
        }


def _score_queries(
    params: ModelParams,
    tokenizer: Tokenizer,
    queries_by_rank: dict[Rank, list[RankedQuery]],
    mode: str,
    step: int,
    max_new: int,
) -> EvalReport:
    rank_bleu: dict[Rank, float] = {}
    rank_ppl: dict[Rank, float] = {}
    total = 0
    for rank in RANKS:
        queries = queries_by_rank[rank]
        if not queries:
            raise DataError(f"no queries for rank {rank.value}")
        bleus, ppls = [], []
        for q in queries:
            candidate = generate_answer(params, tokenizer, q.question, max_new)
            bleus.append(bleu(candidate, q.answer))
            ppls.append(per_token_ppl(params, tokenizer, q.question, q.answer))
        rank_bleu[rank] = sum(bleus) / len(bleus)
        rank_ppl[rank] = sum(ppls) / len(ppls)
        total += len(queries)
    return EvalReport(mode=mode, step=step, rank_bleu=rank_bleu, rank_ppl=rank_ppl, n_queries=total)


def evaluate_efficacy(
    params: ModelParams,
    inst: EditInstance,
    tokenizer: Tokenizer,
    max_new: int = 32,
    step: int = 0,
) -> EvalReport:
    """Score every query of the instance, per rank, on the given snapshot."""
    by_rank = {rank: inst.queries_for(rank) for rank in RANKS}
    return _score_queries(params, tokenizer, by_rank, "efficacy", step, max_new)


def evaluate_specificity(
    params: ModelParams,
    history: Sequence[EditInstance],
    coeff: float,
    rng: np.random.Generator,
    tokenizer: Tokenizer,
    max_new: int = 32,
    step: int = 0,
) -> EvalReport:
    """Retention check over past edits.

    Samples ceil(coeff * |history|) instances without replacement and, for
    each, one query per rank, so every sampled instance contributes to all
    four ranks. Scoring is identical to efficacy.
    """
    if not history:
        raise DataError("specificity needs a non-empty history")
    if not (0.0 < coeff <= 1.0):
        raise ConfigError(f"sampling coefficient must be in (0, 1], got {coeff}")
    n = len(history)
    m = max(1, math.ceil(coeff * n - 1e-9))
    indices = sorted(int(i) for i in rng.choice(n, size=m, replace=False))
    by_rank: dict[Rank, list[RankedQuery]] = {rank: [] for rank in RANKS}
    for i in indices:
        inst = history[i]
        for rank in RANKS:
            queries = inst.queries_for(rank)
            pick = queries[int(rng.integers(len(queries)))]
            by_rank[rank].append(pick)
    return _score_queries(params, tokenizer, by_rank, "specificity", step, max_new)


# ---------------------------------------------------------------------------
# frozen CSV schema: step,mode,rank,bleu,ppl with one row per rank plus an
# "average" row per report; floats use repr() so files are byte-stable.
# ---------------------------------------------------------------------------


def write_eval_csv(reports: Iterable[EvalReport], path, manifest_hash: Optional[str] = None) -> None:
    lines = []
    if manifest_hash:
        lines.append(f"# manifest_hash={manifest_hash}")
    lines.append(",".join(EVAL_CSV_COLUMNS))
    for rep in reports:
        for rank in RANKS:
            lines.append(
                f"{rep.step},{rep.mode},{rank.value},{rep.rank_bleu[rank]!r},{rep.rank_ppl[rank]!r}"
            )
        lines.append(f"{rep.step},{rep.mode},average,{rep.average_bleu!r},{rep.average_ppl!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_csv(path) -> list[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#") or line.startswith("step,"):
            continue
        step, mode, rank, bleu_s, ppl_s = line.split(",")
        rows.append(
            {
                "step": int(step),
                "mode": mode,
                "rank": rank,
                "bleu": float(bleu_s),
                "ppl": float(ppl_s),
            }
        )
    return rows
