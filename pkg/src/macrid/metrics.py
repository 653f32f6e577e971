"""Ranking metrics under the fold-in protocol, plus disentanglement diagnostics.

Held-out users are encoded from their fold-in items only; fold-in items are
excluded from the ranking and the held-out remainder is the relevance set.
NDCG@100 uses gain 1 and discount 1/log2(rank+1); Recall@K divides hits by
min(K, number of held-out items). Score ties break by ascending item index.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .corpus import InteractionMatrix, SplitSpec
from .errors import DataError, MacridError
from .model import (ConceptAssignment, HyperParams, ModelParams, UserPosterior,
                    _encode_graph, prototype_logits, sample_assignment,
                    score_all_items)
from .numerics import Tensor

NDCG_CUTOFF = 100
RECALL_CUTOFFS = (20, 50)


@dataclass
class RankingResult:
    ndcg100: np.ndarray  # per evaluated user
    recall20: np.ndarray
    recall50: np.ndarray
    skipped: int

    def mean(self, which: str) -> float:
        return float(getattr(self, which).mean())

    def stderr(self, which: str) -> float:
        vals = getattr(self, which)
        if len(vals) < 2:
            return 0.0
        return float(vals.std(ddof=1) / np.sqrt(len(vals)))

    def summary(self) -> dict:
        out = {"users": int(len(self.ndcg100)), "skipped": self.skipped}
        for which in ("ndcg100", "recall20", "recall50"):
            out[which] = self.mean(which)
            out[which + "_stderr"] = self.stderr(which)
        return out


@dataclass
class IndependenceScore:
    value: float
    dim: int
    corr: np.ndarray


def rank_items(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending index."""
    return np.argsort(-scores, kind="stable")


def ndcg_at(ranking: np.ndarray, relevant: set, cutoff: int) -> float:
    dcg = 0.0
    for rank, item in enumerate(ranking[:cutoff], start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(cutoff, len(relevant)) + 1))
    return dcg / ideal if ideal > 0 else 0.0


def recall_at(ranking: np.ndarray, relevant: set, cutoff: int) -> float:
    hits = sum(1 for item in ranking[:cutoff] if int(item) in relevant)
    return hits / min(cutoff, len(relevant))


def evaluate(params: ModelParams, corpus: InteractionMatrix, split: SplitSpec,
             which: str = "validation", hp: HyperParams | None = None,
             batch_size: int = 512) -> RankingResult:
    """Strong-generalization evaluation over one held-out user set."""
    if which == "validation":
        users = split.validation_users
    elif which == "test":
        users = split.test_users
    else:
        raise MacridError(f"unknown evaluation split {which!r}")
    if len(users) == 0:
        raise DataError("no held-out users to evaluate")
    hp = hp or HyperParams(k=params.n_concepts, d=params.dim, tau=params.tau,
                           sigma0=params.sigma0)

    assignment = sample_assignment(prototype_logits(params), 1.0, mode="infer")
    c_t = Tensor(assignment.weights)
    pt = params.tensors()

    ndcg, r20, r50 = [], [], []
    skipped = 0
    for start in range(0, len(users), batch_size):
        chunk = users[start: start + batch_size]
        foldins, helds, keep = [], [], []
        for u in chunk:
            fold = split.foldin.get(int(u))
            held = split.heldout_items(corpus, int(u)) if fold is not None else None
            if fold is None or len(fold) == 0 or held is None or len(held) == 0:
                warnings.warn(f"user {int(u)} lacks fold-in or held-out items; skipped")
                skipped += 1
                continue
            foldins.append(fold)
            helds.append(held)
            keep.append(int(u))
        if not keep:
            continue
        _, _, z, _ = _encode_graph(foldins, c_t, pt, params, hp, "infer", None)
        logp = score_all_items(z.data, assignment, params)
        for i, u in enumerate(keep):
            scores = logp[i].copy()
            scores[foldins[i]] = -np.inf  # never rank fold-in items
            ranking = rank_items(scores)
            relevant = set(int(x) for x in helds[i])
            ndcg.append(ndcg_at(ranking, relevant, NDCG_CUTOFF))
            r20.append(recall_at(ranking, relevant, RECALL_CUTOFFS[0]))
            r50.append(recall_at(ranking, relevant, RECALL_CUTOFFS[1]))

    return RankingResult(ndcg100=np.array(ndcg), recall20=np.array(r20),
                         recall50=np.array(r50), skipped=skipped)


def independence(reps: np.ndarray) -> IndependenceScore:
    """1 - mean absolute pairwise Pearson correlation across dimensions."""
    reps = np.asarray(reps, dtype=np.float64)
    if reps.ndim != 2 or reps.shape[1] < 2:
        raise MacridError("independence needs an N x d matrix with d >= 2")
    if reps.shape[0] < 2:
        raise MacridError("independence needs at least two rows")
    d = reps.shape[1]
    constant = reps.max(axis=0) == reps.min(axis=0)
    if constant.any():
        warnings.warn(f"{int(constant.sum())} constant dimensions; correlations set to 0")
    centered = reps - reps.mean(axis=0)
    std = centered.std(axis=0)
    denom = np.where(constant, 1.0, std) * np.sqrt(reps.shape[0])
    normed = centered / denom
    corr = normed.T @ normed
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 1.0)
    upper = np.triu_indices(d, k=1)
    value = 1.0 - (2.0 / (d * (d - 1))) * np.abs(corr[upper]).sum()
    return IndependenceScore(value=float(value), dim=d, corr=corr)


def cluster_agreement(assignment: ConceptAssignment, labels) -> float:
    """Adjusted Rand index between argmax concepts and ground-truth labels."""
    labels = np.asarray(labels)
    pred = assignment.concepts
    if len(labels) != len(pred):
        raise DataError(f"label count {len(labels)} != item count {len(pred)}")
    _, pred_ids = np.unique(pred, return_inverse=True)
    _, true_ids = np.unique(labels, return_inverse=True)
    n = len(labels)
    table = np.zeros((pred_ids.max() + 1, true_ids.max() + 1), dtype=np.int64)
    np.add.at(table, (pred_ids, true_ids), 1)

    comb2 = lambda x: x * (x - 1) / 2.0
    sum_cells = comb2(table).sum()
    sum_rows = comb2(table.sum(axis=1)).sum()
    sum_cols = comb2(table.sum(axis=0)).sum()
    expected = sum_rows * sum_cols / comb2(n)
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0  # both clusterings degenerate in the same way
    return float((sum_cells - expected) / (max_index - expected))


@dataclass
class UserExport:
    user_id: str
    posterior: UserPosterior
    confidence: np.ndarray  # (K,) sum of assignment weights over the user's items


def component_confidence(assignment: ConceptAssignment, row) -> np.ndarray:
    """Per-concept confidence: sum of the user's item assignment weights."""
    return assignment.weights[np.asarray(row)].sum(axis=0)


def export_embeddings(params: ModelParams, assignment: ConceptAssignment,
                      users, item_vocab, path):
    """Tab-separated item rows (id, concept, d values) then user-component rows
    (id, k, confidence, d values), for external projection tools."""
    concepts = assignment.concepts
    d = params.dim
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# item: id concept " + " ".join(f"v{j}" for j in range(d))
                     + " | user: id k confidence " + " ".join(f"v{j}" for j in range(d))
                     + "\n")
            for i in range(params.n_items):
                vals = "\t".join(repr(float(x)) for x in params.item_reps[i])
                fh.write(f"{item_vocab[i]}\t{concepts[i]}\t{vals}\n")
            for entry in users:
                for k in range(params.n_concepts):
                    vals = "\t".join(repr(float(x)) for x in entry.posterior.mu[k])
                    conf = repr(float(entry.confidence[k]))
                    fh.write(f"{entry.user_id}\t{k}\t{conf}\t{vals}\n")
    except OSError as exc:
        raise DataError(f"cannot write embedding export to {path}: {exc}") from exc


def parse_embedding_export(path):
    """Inverse of :func:`export_embeddings`; returns (item_rows, user_rows)."""
    items, users = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("# item:"):
            raise DataError("missing export header")
        item_section = header.split("|")[0]
        d = sum(1 for tok in item_section.split() if tok.startswith("v"))
        for line in fh:
            fields = line.rstrip("\n").split("\t")
            if len(fields) == 2 + d:
                items.append((fields[0], int(fields[1]),
                              np.array([float(x) for x in fields[2:]])))
            elif len(fields) == 3 + d:
                users.append((fields[0], int(fields[1]), float(fields[2]),
                              np.array([float(x) for x in fields[3:]])))
            else:
                raise DataError(f"malformed export row with {len(fields)} fields")
    return items, users
