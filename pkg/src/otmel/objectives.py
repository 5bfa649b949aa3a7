"""Training objectives and a desk-scale finite-difference trainer.

The contrastive losses treat each batch's score matrices as softmax
classification problems with the gold pair on the diagonal. Distillation
compares a transport plan (teacher, held constant) against attention
logits (student) through row- and column-wise KL divergences. The toy
trainer descends these objectives over the projection tables with central
finite differences; it is meant for small synthetic datasets only and
guards its input sizes accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ABLATION_NO_FUSED, ABLATION_NO_UNIMODAL, RunConfig
from .correlation import (
    ATTENTION,
    OT,
    PIPELINE_SITES,
    REVERSE_UNIMODAL_SITES,
    AssignmentSite,
    ProjectionTable,
    assign,
    cosine_cost,
    project,
)
from .data_io import Dataset
from .errors import ConfigError, DimensionError, NonFiniteError
from .matching import Scorer, stack_pool
from .ot import Marginals, sinkhorn
from .types import FeatureMatrix, MentionRecord, ProjectionSet


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def contrastive_loss(scores: np.ndarray) -> float:
    """Mean over rows of the negative log-softmax mass on the diagonal.

    Row i is mention i's scores over the in-batch candidates, with the
    gold entity at column i.
    """
    scores = np.asarray(scores, float)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"score matrix must be square, got {scores.shape}")
    log_probs = _log_softmax(scores, axis=1)
    return float(-np.mean(np.diag(log_probs)))


@dataclass(frozen=True)
class BatchScores:
    """Square in-batch score matrices, one per score kind.

    ``o`` is always present; ``f``/``t``/``v`` are None when the run
    configuration ablates them.
    """

    o: np.ndarray
    f: np.ndarray | None = None
    t: np.ndarray | None = None
    v: np.ndarray | None = None


def batch_scores(mentions, entities, scorer: Scorer) -> BatchScores:
    """Score every mention against every entity; diagonal pairs are gold.

    Callers arrange ``entities`` so that entity j is mention j's gold.
    """
    if len(mentions) != len(entities):
        raise DimensionError(
            f"batch needs matching counts, got {len(mentions)} mentions "
            f"and {len(entities)} entities"
        )
    b = len(mentions)
    f = np.empty((b, b)) if scorer.uses_fused else None
    t = np.empty((b, b)) if scorer.uses_unimodal else None
    v = np.empty((b, b)) if scorer.uses_unimodal else None
    o = np.empty((b, b))
    for i, m in enumerate(mentions):
        for j, e in enumerate(entities):
            s = scorer.scores(m, e)
            o[i, j] = s.s_o
            if f is not None:
                f[i, j] = s.s_f
            if t is not None:
                t[i, j] = s.s_t
                v[i, j] = s.s_v
    return BatchScores(o=o, f=f, t=t, v=v)


def total_matching_loss(batch: BatchScores) -> float:
    """Contrastive loss on the overall scores plus every present component."""
    total = contrastive_loss(batch.o)
    for matrix in (batch.f, batch.t, batch.v):
        if matrix is not None:
            total += contrastive_loss(matrix)
    return total


@dataclass(frozen=True)
class DistillPair:
    """One teacher plan and the student logits for the same assignment."""

    plan: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        plan = np.asarray(self.plan, float)
        logits = np.asarray(self.logits, float)
        if plan.shape != logits.shape:
            raise DimensionError(
                f"plan {plan.shape} and logits {logits.shape} shapes differ"
            )
        if not np.isfinite(logits).all() or not np.isfinite(plan).all():
            raise NonFiniteError("distillation operands must be finite")
        object.__setattr__(self, "plan", plan)
        object.__setattr__(self, "logits", logits)


def kd_pair_loss(plan: np.ndarray, logits: np.ndarray) -> float:
    """Distillation divergence for one assignment.

    Both operands are pushed through a softmax along each axis; the loss
    averages the summed row-wise and column-wise KL divergences from the
    plan's distributions to the logits'.
    """
    pair = DistillPair(plan, logits)

    def directed(axis: int) -> float:
        lp = _log_softmax(pair.plan, axis)
        lq = _log_softmax(pair.logits, axis)
        return float(np.sum(np.exp(lp) * (lp - lq)))

    return 0.5 * (directed(1) + directed(0))


def kd_loss(pairs) -> float:
    """Total distillation loss: the sum over all teacher/student pairs."""
    return float(sum(kd_pair_loss(p.plan, p.logits) for p in pairs))


def total_loss_with_kd(batch: BatchScores, pairs) -> float:
    """Matching loss plus the distillation term."""
    return total_matching_loss(batch) + kd_loss(pairs)


# --- distillation bookkeeping -------------------------------------------

_CROSS_LEGS = {
    AssignmentSite.MENTION_VISUAL_TO_TEXT: ("mention", "text", "visual"),
    AssignmentSite.MENTION_TEXT_TO_VISUAL: ("mention", "visual", "text"),
    AssignmentSite.ENTITY_VISUAL_TO_TEXT: ("entity", "text", "visual"),
    AssignmentSite.ENTITY_TEXT_TO_VISUAL: ("entity", "visual", "text"),
}
_PAIR_LEGS = {
    AssignmentSite.MENTION_TO_ENTITY_TEXT: ("text", False),
    AssignmentSite.MENTION_TO_ENTITY_VISUAL: ("visual", False),
    AssignmentSite.ENTITY_TO_MENTION_TEXT: ("text", True),
    AssignmentSite.ENTITY_TO_MENTION_VISUAL: ("visual", True),
}


def _unique_by_identity(records):
    seen = set()
    out = []
    for r in records:
        if id(r) not in seen:
            seen.add(id(r))
            out.append(r)
    return out


def distill_instances(
    mentions, golds, sites=PIPELINE_SITES
) -> dict[AssignmentSite, list[tuple[FeatureMatrix, FeatureMatrix]]]:
    """The (destination, source) matrix pairs distilled at each site.

    Cross-modal sites contribute one instance per record; unimodal sites
    one per mention/gold pair (reverse sites swap the roles).
    """
    entities = _unique_by_identity(golds)
    instances: dict[AssignmentSite, list[tuple[FeatureMatrix, FeatureMatrix]]] = {}
    for site in sites:
        if site in _CROSS_LEGS:
            kind, dst_attr, src_attr = _CROSS_LEGS[site]
            records = mentions if kind == "mention" else entities
            instances[site] = [
                (getattr(r, dst_attr), getattr(r, src_attr)) for r in records
            ]
        else:
            attr, reverse = _PAIR_LEGS[site]
            pairs = []
            for m, e in zip(mentions, golds):
                m_mat, e_mat = getattr(m, attr), getattr(e, attr)
                pairs.append((m_mat, e_mat) if reverse else (e_mat, m_mat))
            instances[site] = pairs
    return instances


def _teacher_plan(dst, src, proj, solver_config) -> np.ndarray:
    q, k, _ = project(dst, src, proj)
    cost = cosine_cost(q, k)
    return sinkhorn(cost, Marginals.uniform(cost.n, cost.m), solver_config).data


def _student_logits(dst, src, proj) -> np.ndarray:
    q, k, _ = project(dst, src, proj)
    return q @ k.T / np.sqrt(proj.dim)


def distill_pairs(
    mentions, golds, table: ProjectionTable, run: RunConfig, sites=PIPELINE_SITES
) -> dict[AssignmentSite, list[DistillPair]]:
    """Teacher plans and student logits for every distilled assignment."""
    solver = run.sinkhorn_config()
    out: dict[AssignmentSite, list[DistillPair]] = {}
    for site, pairs in distill_instances(mentions, golds, sites).items():
        proj = table[site]
        out[site] = [
            DistillPair(
                _teacher_plan(dst, src, proj, solver), _student_logits(dst, src, proj)
            )
            for dst, src in pairs
        ]
    return out


def distill_gap(
    dataset: Dataset,
    table: ProjectionTable,
    run: RunConfig = RunConfig(),
    sites=PIPELINE_SITES,
) -> dict[AssignmentSite, float]:
    """Mean per-site divergence between transport plans and attention logits."""
    mentions = list(dataset.mentions)
    if not mentions:
        raise ConfigError("distillation gap needs at least one mention")
    golds = [dataset.gold_of(m) for m in mentions]
    gaps = {}
    for site, pairs in distill_pairs(mentions, golds, table, run, sites).items():
        gaps[site] = float(
            np.mean([kd_pair_loss(p.plan, p.logits) for p in pairs])
        )
    return gaps


# --- toy trainer ---------------------------------------------------------

OBJECTIVE_OT = "ot"
OBJECTIVE_KD = "kd"

MAX_TRAIN_DIM = 16
MAX_TRAIN_LEN = 8
MAX_TRAIN_BATCH = 8

_MATRIX_NAMES = ("w_q", "w_k", "w_h")


@dataclass(frozen=True)
class ToyTrainConfig:
    """Settings for the finite-difference trainer."""

    steps: int
    lr: float = 1e-2
    fd_step: float = 1e-4
    objective: str = OBJECTIVE_OT
    include_reverse_sites: bool = False

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.fd_step > 0:
            raise ConfigError(f"fd_step must be positive, got {self.fd_step}")
        if self.objective not in (OBJECTIVE_OT, OBJECTIVE_KD):
            raise ConfigError(
                f"objective must be {OBJECTIVE_OT!r} or {OBJECTIVE_KD!r}, "
                f"got {self.objective!r}"
            )

    def trainable_sites(self) -> tuple[AssignmentSite, ...]:
        if self.objective == OBJECTIVE_KD and self.include_reverse_sites:
            return PIPELINE_SITES + REVERSE_UNIMODAL_SITES
        return PIPELINE_SITES

    def distilled_sites(self) -> tuple[AssignmentSite, ...]:
        return self.trainable_sites() if self.objective == OBJECTIVE_KD else ()


@dataclass(frozen=True)
class TraceRow:
    """One logged training step; ``total`` is the descended objective."""

    step: int
    l_f: float
    l_t: float
    l_v: float
    l_o: float
    l_kd: float
    total: float


class _BatchObjective:
    """The batch objective as a function of one site's override.

    All per-site intermediate results are cached at construction, so a
    finite-difference probe that perturbs a single site only recomputes
    the pieces downstream of that site. Teacher plans are computed once
    here and held constant across probes, which is what makes the
    distillation term a pure student-side objective within a step.
    """

    def __init__(self, mentions, golds, table, run: RunConfig, kd_sites=()):
        self.mentions = list(mentions)
        self.golds = list(golds)
        self.table = table
        self.run = run
        self.solver = run.sinkhorn_config()
        self.use_fused = ABLATION_NO_FUSED not in run.ablations
        self.use_unimodal = ABLATION_NO_UNIMODAL not in run.ablations
        self.kd_sites = tuple(kd_sites)

        # Assignment matrices are cached so probes that only move w_h (which
        # cannot change any assignment) skip the solves entirely.
        self._legs: dict[tuple[int, AssignmentSite], AssignmentResult] = {}
        self._uni_plans: dict[tuple[str, int, int], np.ndarray] = {}
        if self.use_fused:
            self.m_text_pool = [self._pooled_leg(m, "text") for m in self.mentions]
            self.m_vis_pool = [self._pooled_leg(m, "visual") for m in self.mentions]
            self.e_text_pool = [self._pooled_leg(e, "text") for e in self.golds]
            self.e_vis_pool = [self._pooled_leg(e, "visual") for e in self.golds]
            self.f = self._fused_matrix(
                self.m_text_pool, self.m_vis_pool, self.e_text_pool, self.e_vis_pool
            )
        else:
            self.f = None
        if self.use_unimodal:
            self.t = self._uni_matrix(
                "text", table[AssignmentSite.MENTION_TO_ENTITY_TEXT], record=True
            )
            self.v = self._uni_matrix(
                "visual", table[AssignmentSite.MENTION_TO_ENTITY_VISUAL], record=True
            )
        else:
            self.t = None
            self.v = None

        if self.kd_sites:
            self._instances = distill_instances(self.mentions, self.golds, self.kd_sites)
            self._teachers = {
                site: [
                    _teacher_plan(dst, src, table[site], self.solver)
                    for dst, src in pairs
                ]
                for site, pairs in self._instances.items()
            }
            self.kd_terms = {
                site: self._site_kd(site, table[site]) for site in self.kd_sites
            }
        else:
            self.kd_terms = {}

    # -- cached pieces

    def _cross_site(self, record, dst_attr) -> AssignmentSite:
        is_mention = isinstance(record, MentionRecord)
        if dst_attr == "text":
            return (
                AssignmentSite.MENTION_VISUAL_TO_TEXT
                if is_mention
                else AssignmentSite.ENTITY_VISUAL_TO_TEXT
            )
        return (
            AssignmentSite.MENTION_TEXT_TO_VISUAL
            if is_mention
            else AssignmentSite.ENTITY_TEXT_TO_VISUAL
        )

    @staticmethod
    def _sides(record, dst_attr):
        dst = getattr(record, dst_attr)
        src = getattr(record, "visual" if dst_attr == "text" else "text")
        return dst, src

    def _leg_result(self, record, dst_attr) -> AssignmentResult:
        site = self._cross_site(record, dst_attr)
        key = (id(record), site)
        result = self._legs.get(key)
        if result is None:
            dst, src = self._sides(record, dst_attr)
            result = assign(dst, src, self.table[site], self.run.mechanism, self.solver)
            self._legs[key] = result
        return result

    def _pooled_leg(self, record, dst_attr) -> np.ndarray:
        g = self._leg_result(record, dst_attr).g
        return stack_pool([getattr(record, dst_attr), g], self.run.pool)

    def _transported_g(self, record, dst_attr, proj, changed) -> np.ndarray:
        if changed == "w_h":
            a = self._leg_result(record, dst_attr).a
            _, src = self._sides(record, dst_attr)
            return a @ (src.data @ proj.w_h)
        dst, src = self._sides(record, dst_attr)
        return assign(dst, src, proj, self.run.mechanism, self.solver).g

    def _fused_matrix(self, m_text, m_vis, e_text, e_vis) -> np.ndarray:
        return np.array(m_text) @ np.array(e_text).T + np.array(m_vis) @ np.array(
            e_vis
        ).T

    def _uni_cell(self, attr, m, e, proj, changed, record) -> float:
        m_mat = getattr(m, attr)
        e_mat = getattr(e, attr)
        if changed == "w_h":
            a = self._uni_plans[(attr, id(m), id(e))]
            g = a @ (m_mat.data @ proj.w_h)
        else:
            result = assign(e_mat, m_mat, proj, self.run.mechanism, self.solver)
            g = result.g
            if record:
                self._uni_plans[(attr, id(m), id(e))] = result.a
        pooled = stack_pool([g], self.run.pool)
        t_m = m_mat.summary
        t_e = e_mat.summary
        return float(0.5 * (pooled @ t_e + t_m @ t_e))

    def _uni_matrix(self, attr, proj, changed=None, record=False) -> np.ndarray:
        b = len(self.mentions)
        out = np.empty((b, b))
        columns: dict[int, np.ndarray] = {}
        for j, e in enumerate(self.golds):
            col = columns.get(id(e))
            if col is None:
                col = np.array(
                    [
                        self._uni_cell(attr, m, e, proj, changed, record)
                        for m in self.mentions
                    ]
                )
                columns[id(e)] = col
            out[:, j] = col
        return out

    def _site_kd(self, site, proj) -> float:
        teachers = self._teachers[site]
        pairs = self._instances[site]
        return float(
            sum(
                kd_pair_loss(plan, _student_logits(dst, src, proj))
                for plan, (dst, src) in zip(teachers, pairs)
            )
        )

    # -- losses

    def _combine(self, f, t, v) -> tuple[float, float, float, float]:
        parts = [x for x in (f, t, v) if x is not None]
        o = sum(parts) / len(parts)
        l_f = contrastive_loss(f) if f is not None else 0.0
        l_t = contrastive_loss(t) if t is not None else 0.0
        l_v = contrastive_loss(v) if v is not None else 0.0
        l_o = contrastive_loss(o)
        return l_f, l_t, l_v, l_o

    def components(self) -> TraceRow:
        l_f, l_t, l_v, l_o = self._combine(self.f, self.t, self.v)
        l_kd = float(sum(self.kd_terms.values()))
        matching = l_o + l_f + l_t + l_v
        return TraceRow(
            step=0,
            l_f=l_f,
            l_t=l_t,
            l_v=l_v,
            l_o=l_o,
            l_kd=l_kd,
            total=matching + l_kd,
        )

    def loss(self) -> float:
        return self.components().total

    def loss_with(
        self, site: AssignmentSite, proj: ProjectionSet, changed: str | None = None
    ) -> float:
        """Objective value with one site's projections overridden.

        ``changed`` optionally names the single matrix that differs from
        the cached table ("w_q"/"w_k"/"w_h"); probes that only move w_h
        then reuse the cached assignment matrices.
        """
        f, t, v = self.f, self.t, self.v
        if self.use_fused and site in _CROSS_LEGS:
            kind, dst_attr, _ = _CROSS_LEGS[site]
            records = self.mentions if kind == "mention" else self.golds

            pooled_cache: dict[int, np.ndarray] = {}

            def pooled(record):
                got = pooled_cache.get(id(record))
                if got is None:
                    got = stack_pool(
                        [
                            getattr(record, dst_attr),
                            self._transported_g(record, dst_attr, proj, changed),
                        ],
                        self.run.pool,
                    )
                    pooled_cache[id(record)] = got
                return got

            new_pool = [pooled(r) for r in records]
            m_text, m_vis, e_text, e_vis = (
                self.m_text_pool,
                self.m_vis_pool,
                self.e_text_pool,
                self.e_vis_pool,
            )
            if kind == "mention" and dst_attr == "text":
                m_text = new_pool
            elif kind == "mention":
                m_vis = new_pool
            elif dst_attr == "text":
                e_text = new_pool
            else:
                e_vis = new_pool
            f = self._fused_matrix(m_text, m_vis, e_text, e_vis)
        elif self.use_unimodal and site is AssignmentSite.MENTION_TO_ENTITY_TEXT:
            t = self._uni_matrix("text", proj, changed)
        elif self.use_unimodal and site is AssignmentSite.MENTION_TO_ENTITY_VISUAL:
            v = self._uni_matrix("visual", proj, changed)

        l_f, l_t, l_v, l_o = self._combine(f, t, v)
        total = l_o + l_f + l_t + l_v
        if self.kd_sites:
            kd_total = sum(
                value for s, value in self.kd_terms.items() if s is not site
            )
            if site in self.kd_terms:
                if changed == "w_h":
                    # Student logits depend on w_q/w_k only.
                    kd_total += self.kd_terms[site]
                else:
                    kd_total += self._site_kd(site, proj)
            total += float(kd_total)
        return total


def _guard_sizes(dataset: Dataset, table: ProjectionTable) -> None:
    dims = {p.dim for p in table.values()} | {dataset.d}
    if max(dims) > MAX_TRAIN_DIM:
        raise ConfigError(
            f"toy trainer is limited to d <= {MAX_TRAIN_DIM}, got {max(dims)}"
        )
    if len(dataset.mentions) > MAX_TRAIN_BATCH:
        raise ConfigError(
            f"toy trainer is limited to {MAX_TRAIN_BATCH} mentions, "
            f"got {len(dataset.mentions)}"
        )
    for record in [*dataset.mentions, *dataset.entities]:
        longest = max(record.text.rows, record.visual.rows)
        if longest > MAX_TRAIN_LEN:
            raise ConfigError(
                f"toy trainer is limited to sequences of {MAX_TRAIN_LEN} rows, "
                f"record {record.id!r} has {longest}"
            )


def _training_run(run: RunConfig | None, objective: str) -> RunConfig:
    # A tighter solver tolerance than ranking runs keeps the central
    # differences smooth.
    base = run if run is not None else RunConfig(tol=1e-9)
    mechanism = OT if objective == OBJECTIVE_OT else ATTENTION
    return replace(base, mechanism=mechanism)


def _objective_state(dataset, table, train: ToyTrainConfig, run: RunConfig):
    mentions = list(dataset.mentions)
    if not mentions:
        raise ConfigError("training needs at least one mention")
    golds = [dataset.gold_of(m) for m in mentions]
    return _BatchObjective(mentions, golds, table, run, train.distilled_sites())


def fd_gradient(
    dataset: Dataset,
    table: ProjectionTable,
    train: ToyTrainConfig,
    run: RunConfig | None = None,
    coords=None,
) -> dict[tuple[AssignmentSite, str, int, int], float]:
    """Central-difference gradient of the training objective.

    ``coords`` limits the computation to selected
    (site, matrix name, row, column) entries; by default every entry of
    every trainable site is probed.
    """
    run = _training_run(run, train.objective)
    _guard_sizes(dataset, table)
    state = _objective_state(dataset, table, train, run)
    if coords is None:
        coords = [
            (site, name, i, j)
            for site in train.trainable_sites()
            for name in _MATRIX_NAMES
            for i in range(table[site].dim)
            for j in range(table[site].dim)
        ]
    h = train.fd_step
    grads = {}
    for site, name, i, j in coords:
        proj = table[site]
        base = getattr(proj, name)
        plus = base.copy()
        plus[i, j] += h
        minus = base.copy()
        minus[i, j] -= h
        up = state.loss_with(site, proj.replace(**{name: plus}), changed=name)
        down = state.loss_with(site, proj.replace(**{name: minus}), changed=name)
        grads[(site, name, i, j)] = (up - down) / (2.0 * h)
    return grads


def batch_loss_report(
    dataset: Dataset,
    table: ProjectionTable,
    run: RunConfig | None = None,
    objective: str = OBJECTIVE_OT,
) -> TraceRow:
    """All loss components of one batch under the given objective."""
    if objective not in (OBJECTIVE_OT, OBJECTIVE_KD):
        raise ConfigError(f"unknown objective {objective!r}")
    run = _training_run(run, objective)
    mentions = list(dataset.mentions)
    if not mentions:
        raise ConfigError("loss report needs at least one mention")
    golds = [dataset.gold_of(m) for m in mentions]
    kd_sites = PIPELINE_SITES if objective == OBJECTIVE_KD else ()
    return _BatchObjective(mentions, golds, table, run, kd_sites).components()


def toy_train(
    dataset: Dataset,
    table: ProjectionTable,
    train: ToyTrainConfig,
    run: RunConfig | None = None,
) -> tuple[ProjectionTable, list[TraceRow]]:
    """Plain gradient descent on the projection tables via central differences.

    The ``ot`` objective is the matching loss with transport-based
    assignments; the ``kd`` objective scores with attention and adds the
    distillation term, whose teacher plans are recomputed once per step
    and held constant within it. Returns the trained table and one trace
    row per step (row 0 is the starting point). Deterministic.
    """
    run = _training_run(run, train.objective)
    _guard_sizes(dataset, table)

    state = _objective_state(dataset, table, train, run)
    trace = [replace(state.components(), step=0)]
    sites = train.trainable_sites()
    h = train.fd_step

    for step in range(1, train.steps + 1):
        updates: dict[AssignmentSite, ProjectionSet] = {}
        for site in sites:
            proj = table[site]
            new_mats = {}
            for name in _MATRIX_NAMES:
                base = getattr(proj, name)
                grad = np.empty_like(base)
                for i in range(base.shape[0]):
                    for j in range(base.shape[1]):
                        plus = base.copy()
                        plus[i, j] += h
                        minus = base.copy()
                        minus[i, j] -= h
                        up = state.loss_with(
                            site, proj.replace(**{name: plus}), changed=name
                        )
                        down = state.loss_with(
                            site, proj.replace(**{name: minus}), changed=name
                        )
                        grad[i, j] = (up - down) / (2.0 * h)
                new_mats[name] = base - train.lr * grad
            updates[site] = proj.replace(**new_mats)
        table = {**table, **updates}
        state = _objective_state(dataset, table, train, run)
        trace.append(replace(state.components(), step=step))

    return table, trace
