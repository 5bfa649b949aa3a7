"""Candidate ranking and retrieval metrics.

Gold ranks are pessimistic under score ties: the gold entity takes the
worst position inside its tie group, so degenerate all-equal scores can
never inflate the metrics. Metric reductions run on exact rationals, so
results are independent of mention ordering and thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError, DataError
from .matching import Scorer
from .types import EntityRecord, MentionRecord


@dataclass(frozen=True)
class RankingResult:
    """One mention's candidate ordering (descending overall score).

    ``ordering`` breaks score ties by candidate id; ``rank_of_gold`` is
    1-based and pessimistic under ties. It is None when the ranking was
    produced without evaluation.
    """

    mention_id: str
    ordering: tuple[str, ...]
    rank_of_gold: int | None


def rank_candidates(
    mention: MentionRecord,
    entities: list[EntityRecord] | tuple[EntityRecord, ...],
    scorer: Scorer,
    evaluate: bool = True,
) -> RankingResult:
    """Score every candidate for one mention and rank them."""
    if len(entities) == 0:
        raise DataError(f"mention {mention.id!r} has an empty candidate list")
    gold = mention.gold_entity
    if evaluate:
        if gold is None:
            raise DataError(f"mention {mention.id!r} has no gold entity to evaluate")
        if all(e.id != gold for e in entities):
            raise DataError(
                f"gold entity {gold!r} of mention {mention.id!r} "
                "is not among the candidates"
            )

    scored = [(scorer.scores(mention, e).s_o, e.id) for e in entities]
    ordering = tuple(eid for _, eid in sorted(scored, key=lambda t: (-t[0], t[1])))

    rank = None
    if evaluate:
        gold_score = next(s for s, eid in scored if eid == gold)
        rank = sum(1 for s, _ in scored if s > gold_score) + sum(
            1 for s, _ in scored if s == gold_score
        )
    return RankingResult(mention_id=mention.id, ordering=ordering, rank_of_gold=rank)


def rank_all(
    mentions,
    entities,
    scorer: Scorer,
    evaluate: bool = True,
    threads: int = 1,
) -> list[RankingResult]:
    """Rank every mention against the shared candidate set.

    Entity-side caches are warmed up front so the per-mention work can
    fan out to a thread pool without cache races.
    """
    entities = list(entities)
    scorer.warm(entities)
    mentions = list(mentions)
    if threads <= 1 or len(mentions) <= 1:
        return [rank_candidates(m, entities, scorer, evaluate) for m in mentions]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(
            pool.map(lambda m: rank_candidates(m, entities, scorer, evaluate), mentions)
        )


def _ranks(results) -> list[int]:
    if len(results) == 0:
        raise DataError("no ranking results to aggregate")
    ranks = []
    for r in results:
        if r.rank_of_gold is None:
            raise DataError(f"result for mention {r.mention_id!r} carries no gold rank")
        ranks.append(r.rank_of_gold)
    return ranks


def hits_at_k(results, k: int) -> float:
    """Fraction of mentions whose gold entity ranks within the top k."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranks = _ranks(results)
    return float(Fraction(sum(1 for r in ranks if r <= k), len(ranks)))


def mrr(results) -> float:
    """Mean reciprocal rank of the gold entities."""
    ranks = _ranks(results)
    total = sum((Fraction(1, r) for r in ranks), start=Fraction(0))
    return float(total / len(ranks))
