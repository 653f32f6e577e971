"""User-controllable retrieval along one representation dimension.

Starting from an anchor vector, probe the interval of its target coordinate
over which the nearest prototype stays fixed, partition that interval into
subranges holding roughly equal numbers of in-concept items, then beam-search
one item per subrange so the sequence stays close to the anchor (and to
itself) in every other dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientItemsError, MacridError
from .model import ModelParams, UserPosterior

PROBE_TOL = 1e-4
DEFAULT_B = 8
DEFAULT_GAMMA = 1.0
DEFAULT_BEAM = 8


@dataclass
class ControlQuery:
    anchor: np.ndarray  # d-vector, item representation or user component mean
    dim: int
    b: int = DEFAULT_B
    gamma: float = DEFAULT_GAMMA
    beam_width: int = DEFAULT_BEAM
    tau: float | None = None  # defaults to the model's tau

    def validate(self, params: ModelParams):
        if not 0 <= self.dim < params.dim:
            raise MacridError(f"dim {self.dim} out of range 0..{params.dim - 1}")
        if self.b < 1 or self.beam_width < 1 or self.gamma < 0:
            raise MacridError("need b >= 1, beam_width >= 1, gamma >= 0")
        if self.anchor.shape != (params.dim,):
            raise MacridError(f"anchor must be a {params.dim}-vector")


@dataclass
class ControlTrajectory:
    items: list  # B item indices, one per subrange
    dim_values: np.ndarray
    boundaries: np.ndarray  # a_0 .. a_B
    objective: float
    k_star: int
    probed_range: tuple


def anchor_from_item(params: ModelParams, item: int) -> np.ndarray:
    if not 0 <= item < params.n_items:
        raise MacridError(f"item index {item} out of range")
    return params.item_reps[item].astype(np.float64).copy()


def anchor_from_user(posterior: UserPosterior, k: int) -> np.ndarray:
    if not 0 <= k < posterior.mu.shape[0]:
        raise MacridError(f"concept index {k} out of range")
    return posterior.mu[k].astype(np.float64).copy()


def _prototype_argmax(params: ModelParams, vec: np.ndarray) -> int:
    m = params.prototypes.astype(np.float64)
    if params.similarity == "cosine":
        sims = (m @ vec) / ((np.linalg.norm(m, axis=1) + 1e-8)
                            * (np.linalg.norm(vec) + 1e-8))
    else:
        sims = m @ vec
    return int(np.argmax(sims))


def probe_range(h_star: np.ndarray, dim: int, params: ModelParams):
    """Maximal coordinate interval over which the nearest prototype is stable.

    Each endpoint is located by binary search to within PROBE_TOL inside the
    outer bounds [-R, R], R = 10 * max_i |h_{i,dim}|; endpoints clamp to the
    bound when the argmax never changes on that side.
    """
    h_star = np.asarray(h_star, dtype=np.float64)
    if not 0 <= dim < params.dim:
        raise MacridError(f"dim {dim} out of range")
    vec = h_star.copy()
    k_star = _prototype_argmax(params, vec)

    radius = 10.0 * float(np.abs(params.item_reps[:, dim]).max())
    radius = max(radius, 1e-6)
    start = float(h_star[dim])
    lo_bound = min(-radius, start)
    hi_bound = max(radius, start)

    def argmax_at(value: float) -> int:
        vec[dim] = value
        return _prototype_argmax(params, vec)

    def search(inside: float, outside: float) -> float:
        if argmax_at(outside) == k_star:
            return outside  # clamped: argmax never changes on this side
        lo, hi = inside, outside
        while abs(hi - lo) > PROBE_TOL:
            mid = 0.5 * (lo + hi)
            if argmax_at(mid) == k_star:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    b = search(start, hi_bound)
    a = search(start, lo_bound)
    vec[dim] = start
    return a, b, k_star


def _concept_items(params: ModelParams, k_star: int) -> np.ndarray:
    h = params.item_reps.astype(np.float64)
    m = params.prototypes.astype(np.float64)
    if params.similarity == "cosine":
        sims = (h / (np.linalg.norm(h, axis=1, keepdims=True) + 1e-8)) \
            @ (m / (np.linalg.norm(m, axis=1, keepdims=True) + 1e-8)).T
    else:
        sims = h @ m.T
    return np.flatnonzero(np.argmax(sims, axis=1) == k_star)


def _partition_groups(a: float, b: float, concept_items: np.ndarray, dim: int,
                      n_bins: int, params: ModelParams):
    """Boundaries plus the per-bin item groups (equal counts within 1)."""
    vals = params.item_reps[concept_items, dim].astype(np.float64)
    inside = (vals > a) & (vals < b)
    eligible = concept_items[inside]
    eligible_vals = vals[inside]
    if len(eligible) < n_bins:
        raise InsufficientItemsError(len(eligible), n_bins)

    order = np.lexsort((eligible, eligible_vals))  # value, then index
    sorted_items = eligible[order]
    sorted_vals = eligible_vals[order]

    n = len(sorted_items)
    base, rem = divmod(n, n_bins)
    counts = [base + 1] * rem + [base] * (n_bins - rem)
    boundaries = [a]
    groups = []
    cursor = 0
    for t, count in enumerate(counts):
        groups.append(sorted_items[cursor: cursor + count])
        cursor += count
        if t < n_bins - 1:
            boundaries.append(0.5 * (sorted_vals[cursor - 1] + sorted_vals[cursor]))
    boundaries.append(b)
    return np.array(boundaries), groups


def partition(a: float, b: float, concept_items, dim: int, n_bins: int,
              params: ModelParams) -> np.ndarray:
    """Quantile boundaries a_0..a_B over in-range item coordinate values."""
    boundaries, _ = _partition_groups(a, b, np.asarray(concept_items, dtype=np.int64),
                                      dim, n_bins, params)
    return boundaries


def _drop_dim(mat: np.ndarray, dim: int) -> np.ndarray:
    return np.delete(mat, dim, axis=-1)


def select_trajectory(query: ControlQuery, params: ModelParams) -> ControlTrajectory:
    """Beam search for one in-concept item per subrange, maximizing
    exp-cosine similarity to the anchor plus gamma-weighted pairwise coherence
    in all dimensions but the controlled one."""
    query.validate(params)
    tau = query.tau if query.tau is not None else params.tau
    a, b, k_star = probe_range(query.anchor, query.dim, params)
    concept_items = _concept_items(params, k_star)
    boundaries, groups = _partition_groups(a, b, concept_items, query.dim,
                                           query.b, params)

    anchor_rest = _drop_dim(query.anchor, query.dim)
    anchor_rest = anchor_rest / (np.linalg.norm(anchor_rest) + 1e-8)
    used = np.concatenate(groups)
    rest = _drop_dim(params.item_reps[used].astype(np.float64), query.dim)
    rest = rest / (np.linalg.norm(rest, axis=1, keepdims=True) + 1e-8)
    local = {int(item): i for i, item in enumerate(used)}
    anchor_term = np.exp((rest @ anchor_rest) / tau)
    pair_term = np.exp((rest @ rest.T) / tau)

    # Beam over bins; states are (score, chosen tuple), ties broken by the
    # lexicographically smallest item tuple.
    beam = [(0.0, ())]
    for group in groups:
        expanded = []
        for score, chosen in beam:
            for item in group:
                i = local[int(item)]
                gain = anchor_term[i]
                if query.gamma > 0 and chosen:
                    prev = [local[c] for c in chosen]
                    gain += query.gamma * pair_term[i, prev].sum()
                expanded.append((score + gain, chosen + (int(item),)))
        expanded.sort(key=lambda s: (-s[0], s[1]))
        beam = expanded[: query.beam_width]

    objective, items = beam[0]
    dim_values = params.item_reps[list(items), query.dim].astype(np.float64)
    return ControlTrajectory(items=list(items), dim_values=dim_values,
                             boundaries=boundaries, objective=float(objective),
                             k_star=k_star, probed_range=(a, b))
