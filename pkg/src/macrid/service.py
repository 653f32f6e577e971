"""Read-only JSON-over-HTTP facade over a trained checkpoint.

The snapshot (parameters, hard assignment, cached user posteriors) is built
once at startup and never mutated, so request handlers are pure functions
of it. Errors use the body shape {"error": code, "message": text}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import control as ctl
from .corpus import load_corpus_dir
from .errors import InsufficientItemsError, MacridError
from .metrics import component_confidence
from .model import (ConceptAssignment, HyperParams, ModelParams, UserPosterior,
                    encode, load_checkpoint, prototype_logits, sample_assignment)


@dataclass
class ServiceState:
    params: ModelParams
    assignment: ConceptAssignment
    item_vocab: list
    user_vocab: list
    item_index: dict
    user_index: dict
    posteriors: dict  # user dense index -> UserPosterior
    confidences: dict  # user dense index -> (K,) ndarray


def build_state(ckpt_path, corpus_dir) -> ServiceState:
    """Load checkpoint + corpus and precompute every user's posterior from the
    items the encoder is allowed to see (fold-in for held-out users)."""
    params, item_vocab = load_checkpoint(ckpt_path)
    corpus, split = load_corpus_dir(corpus_dir)
    if corpus.item_vocab != item_vocab:
        raise MacridError("checkpoint and corpus item vocabularies differ")
    assignment = sample_assignment(prototype_logits(params), 1.0, mode="infer")
    hp = HyperParams(k=params.n_concepts, d=params.dim, tau=params.tau,
                     sigma0=params.sigma0)

    visible = {}
    for u in range(corpus.n_users):
        row = split.foldin.get(u, corpus.rows[u])
        if len(row) > 0:
            visible[u] = np.asarray(row)
    users = sorted(visible)
    posteriors, confidences = {}, {}
    for start in range(0, len(users), 512):
        chunk = users[start: start + 512]
        batch = encode([visible[u] for u in chunk], assignment, params, hp, "infer")
        for u, post in zip(chunk, batch):
            posteriors[u] = post
            confidences[u] = component_confidence(assignment, visible[u])

    return ServiceState(
        params=params,
        assignment=assignment,
        item_vocab=item_vocab,
        user_vocab=corpus.user_vocab,
        item_index={ext: i for i, ext in enumerate(item_vocab)},
        user_index={ext: u for u, ext in enumerate(corpus.user_vocab)},
        posteriors=posteriors,
        confidences=confidences,
    )


class MetaResponse(BaseModel):
    M: int
    K: int
    d: int
    tau: float
    sigma0: float
    concept_item_counts: list[int]


class Neighbor(BaseModel):
    item: str
    similarity: float


class NeighborsResponse(BaseModel):
    item: str
    concept: int
    neighbors: list[Neighbor]


class Component(BaseModel):
    k: int
    confidence: float
    mu: list[float]


class ComponentsResponse(BaseModel):
    user: str
    components: list[Component]


class ControlRequest(BaseModel):
    item: str | None = None
    user: str | None = None
    k: int | None = None
    dim: int
    b: int = ctl.DEFAULT_B
    gamma: float = ctl.DEFAULT_GAMMA
    beam: int = ctl.DEFAULT_BEAM
    value: float | None = None  # overrides the anchor's controlled coordinate
    tau: float | None = None


class ControlResponse(BaseModel):
    items: list[str]
    dim_values: list[float]
    boundaries: list[float]
    objective: float
    k_star: int
    range: list[float]


class ApiError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message


def create_app(state: ServiceState | None) -> FastAPI:
    app = FastAPI(title="macrid", docs_url=None, redoc_url=None)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    def body(code, message):
        return JSONResponse(status_code=code,
                            content={"error": code, "message": message})

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError):
        return body(exc.code, exc.message)

    @app.exception_handler(StarletteHTTPException)
    async def _http_error(request: Request, exc: StarletteHTTPException):
        return body(exc.status_code, str(exc.detail))

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request: Request, exc: RequestValidationError):
        return body(400, f"invalid request: {exc.errors()}")

    def ready() -> ServiceState:
        if state is None:
            raise ApiError(503, "model not loaded")
        return state

    @app.get("/meta", response_model=MetaResponse)
    def meta():
        st = ready()
        counts = np.bincount(st.assignment.concepts,
                             minlength=st.params.n_concepts)
        return MetaResponse(M=st.params.n_items, K=st.params.n_concepts,
                            d=st.params.dim, tau=st.params.tau,
                            sigma0=st.params.sigma0,
                            concept_item_counts=[int(c) for c in counts])

    @app.get("/items/{item_id}/neighbors", response_model=NeighborsResponse)
    def neighbors(item_id: str, n: int = 10):
        st = ready()
        if item_id not in st.item_index:
            raise ApiError(404, f"unknown item {item_id!r}")
        if n < 1:
            raise ApiError(400, "n must be >= 1")
        idx = st.item_index[item_id]
        concepts = st.assignment.concepts
        members = np.flatnonzero(concepts == concepts[idx])
        members = members[members != idx]
        h = st.params.item_reps.astype(np.float64)
        h = h / (np.linalg.norm(h, axis=1, keepdims=True) + 1e-8)
        sims = h[members] @ h[idx]
        order = np.lexsort((members, -sims))[:n]
        return NeighborsResponse(
            item=item_id,
            concept=int(concepts[idx]),
            neighbors=[Neighbor(item=st.item_vocab[int(members[i])],
                                similarity=float(sims[i])) for i in order])

    @app.get("/users/{user_id}/components", response_model=ComponentsResponse)
    def components(user_id: str):
        st = ready()
        u = st.user_index.get(user_id)
        if u is None or u not in st.posteriors:
            raise ApiError(404, f"unknown user {user_id!r}")
        post = st.posteriors[u]
        conf = st.confidences[u]
        return ComponentsResponse(
            user=user_id,
            components=[Component(k=k, confidence=float(conf[k]),
                                  mu=[float(x) for x in post.mu[k]])
                        for k in range(st.params.n_concepts)])

    @app.post("/control", response_model=ControlResponse)
    def control(req: ControlRequest):
        st = ready()
        if not 0 <= req.dim < st.params.dim:
            raise ApiError(400, f"dim must lie in 0..{st.params.dim - 1}")
        if (req.item is None) == (req.user is None):
            raise ApiError(400, "provide exactly one of item or user as anchor")
        if req.item is not None:
            idx = st.item_index.get(req.item)
            if idx is None:
                raise ApiError(404, f"unknown item {req.item!r}")
            anchor = ctl.anchor_from_item(st.params, idx)
        else:
            u = st.user_index.get(req.user)
            if u is None or u not in st.posteriors:
                raise ApiError(404, f"unknown user {req.user!r}")
            if req.k is None or not 0 <= req.k < st.params.n_concepts:
                raise ApiError(400, "user anchors need a concept index k")
            anchor = ctl.anchor_from_user(st.posteriors[u], req.k)
        if req.value is not None:
            anchor[req.dim] = req.value
        query = ctl.ControlQuery(anchor=anchor, dim=req.dim, b=req.b,
                                 gamma=req.gamma, beam_width=req.beam, tau=req.tau)
        try:
            traj = ctl.select_trajectory(query, st.params)
        except InsufficientItemsError as exc:
            raise ApiError(422, f"insufficient items in concept: {exc.eligible} "
                                f"eligible, need {exc.needed}") from exc
        except MacridError as exc:
            raise ApiError(400, str(exc)) from exc
        return ControlResponse(
            items=[st.item_vocab[i] for i in traj.items],
            dim_values=[float(v) for v in traj.dim_values],
            boundaries=[float(v) for v in traj.boundaries],
            objective=traj.objective,
            k_star=traj.k_star,
            range=[traj.probed_range[0], traj.probed_range[1]])

    return app
