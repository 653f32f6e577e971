"""HTTP facade: endpoint contracts, error bodies, parity with library calls."""

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import make_random_corpus
from macrid import control as ctl
from macrid.corpus import make_split, save_corpus, save_split
from macrid.model import HyperParams, init_params, save_checkpoint
from macrid.service import build_state, create_app


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("svc")
    corpus = make_random_corpus(seed=21, n_users=15, n_items=30, row_min=5,
                                row_max=9)
    split = make_split(corpus, 4, 0.8, seed=21)
    save_corpus(corpus, tmp / "corpus.mcor")
    save_split(split, tmp / "split.json")
    hp = HyperParams(k=2, d=6, sigma0=0.2, neg_samples="full")
    params = init_params(corpus.n_items, hp, seed=21)
    params.mlp_biases[-1] += 0.05
    save_checkpoint(params, corpus.item_vocab, tmp / "model.mcrd")
    state = build_state(tmp / "model.mcrd", tmp)
    return TestClient(create_app(state)), state, corpus, split


def test_meta_counts_sum_to_catalog(served):
    client, state, corpus, _ = served
    r = client.get("/meta")
    assert r.status_code == 200
    body = r.json()
    assert body["M"] == corpus.n_items
    assert body["K"] == 2
    assert len(body["concept_item_counts"]) == 2
    assert sum(body["concept_item_counts"]) == corpus.n_items
    assert r.content == client.get("/meta").content  # immutable snapshot


def test_unloaded_service_returns_503():
    client = TestClient(create_app(None))
    for path in ("/meta", "/items/i0/neighbors", "/users/u0/components"):
        r = client.get(path)
        assert r.status_code == 503
        assert set(r.json()) == {"error", "message"}
    r = client.post("/control", json={"item": "i0", "dim": 0})
    assert r.status_code == 503


def test_neighbors_sorted_and_matches_linear_scan(served):
    client, state, corpus, _ = served
    r = client.get("/items/i3/neighbors", params={"n": 5})
    assert r.status_code == 200
    body = r.json()
    sims = [n["similarity"] for n in body["neighbors"]]
    assert sims == sorted(sims, reverse=True)
    assert all(n["item"] != "i3" for n in body["neighbors"])

    # linear-scan oracle over the item's concept
    idx = corpus.item_vocab.index("i3")
    concepts = state.assignment.concepts
    h = state.params.item_reps.astype(np.float64)
    h = h / np.linalg.norm(h, axis=1, keepdims=True)
    scored = [(float(h[j] @ h[idx]), j) for j in range(corpus.n_items)
              if j != idx and concepts[j] == concepts[idx]]
    scored.sort(key=lambda t: (-t[0], t[1]))
    want = [corpus.item_vocab[j] for _, j in scored[:5]]
    assert [n["item"] for n in body["neighbors"]] == want


def test_neighbors_two_item_concept_returns_the_other(served):
    client, state, corpus, _ = served
    concepts = state.assignment.concepts
    counts = np.bincount(concepts)
    # synthesize the contract on whichever concept is smallest: ask for one
    # neighbor and expect an in-concept item
    item = int(np.flatnonzero(concepts == counts.argmin())[0])
    r = client.get(f"/items/{corpus.item_vocab[item]}/neighbors", params={"n": 1})
    assert r.status_code == 200
    got = r.json()["neighbors"]
    assert len(got) == 1
    other = corpus.item_vocab.index(got[0]["item"])
    assert concepts[other] == concepts[item]


def test_neighbors_unknown_item_404(served):
    client, *_ = served
    r = client.get("/items/nope/neighbors")
    assert r.status_code == 404
    assert r.json()["error"] == 404


def test_components_confidences_and_unit_mu(served):
    client, state, corpus, split = served
    uid = corpus.user_vocab[int(split.train_users[0])]
    r = client.get(f"/users/{uid}/components")
    assert r.status_code == 200
    comps = r.json()["components"]
    assert len(comps) == 2
    total = sum(c["confidence"] for c in comps)
    u = corpus.user_vocab.index(uid)
    assert total == pytest.approx(len(corpus.rows[u]))  # hard one-hot weights
    for c in comps:
        assert c["confidence"] >= 0
        assert np.linalg.norm(c["mu"]) == pytest.approx(1.0, abs=1e-5)


def test_components_unknown_user_404(served):
    client, *_ = served
    assert client.get("/users/ghost/components").status_code == 404


def test_control_matches_library_and_is_deterministic(served):
    client, state, corpus, _ = served
    req = {"item": "i1", "dim": 2, "b": 2, "gamma": 0.5, "beam": 8}
    r1 = client.post("/control", json=req)
    assert r1.status_code == 200
    assert r1.content == client.post("/control", json=req).content

    idx = corpus.item_vocab.index("i1")
    traj = ctl.select_trajectory(
        ctl.ControlQuery(anchor=ctl.anchor_from_item(state.params, idx), dim=2,
                         b=2, gamma=0.5, beam_width=8), state.params)
    body = r1.json()
    assert body["items"] == [corpus.item_vocab[i] for i in traj.items]
    assert body["dim_values"] == pytest.approx(list(traj.dim_values))
    assert body["boundaries"] == pytest.approx(list(traj.boundaries))
    assert body["objective"] == pytest.approx(traj.objective)
    assert body["k_star"] == traj.k_star
    assert len(body["dim_values"]) == 2
    assert np.all(np.diff(body["dim_values"]) >= 0)


def test_control_dim_out_of_range_400(served):
    client, state, *_ = served
    r = client.post("/control", json={"item": "i1", "dim": state.params.dim})
    assert r.status_code == 400
    assert r.json()["error"] == 400


def test_control_oversized_b_422_with_eligible_count(served):
    client, state, corpus, _ = served
    r = client.post("/control", json={"item": "i1", "dim": 0, "b": 29})
    assert r.status_code == 422
    body = r.json()
    assert body["error"] == 422
    assert "eligible" in body["message"]


def test_control_user_anchor_and_slider_value(served):
    client, state, corpus, split = served
    uid = corpus.user_vocab[int(split.train_users[1])]
    base = {"user": uid, "k": 0, "dim": 1, "b": 2, "gamma": 1.0, "beam": 4}
    r = client.post("/control", json=base)
    assert r.status_code == 200
    a, b = r.json()["range"]
    mid = 0.5 * (max(a, -1e6) + min(b, 1e6))
    r2 = client.post("/control", json={**base, "value": mid})
    assert r2.status_code == 200
    assert r2.json()["k_star"] == r.json()["k_star"]


def test_control_requires_exactly_one_anchor(served):
    client, *_ = served
    assert client.post("/control", json={"dim": 0}).status_code == 400
    assert client.post("/control",
                       json={"item": "i1", "user": "u0", "dim": 0}).status_code == 400


def test_malformed_body_uses_error_shape(served):
    client, *_ = served
    r = client.post("/control", json={"item": "i1"})  # dim missing
    assert r.status_code == 400
    assert set(r.json()) == {"error", "message"}


# ----------------------------------------------------------------------------
# Shared contract: responses validate against the checked-in schema files that
# the browser explorer builds against.

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "schema"


def _schema(name):
    return json.loads((SCHEMA_DIR / name).read_text())


def test_control_response_validates_against_shared_schema(served):
    client, *_ = served
    r = client.post("/control", json={"item": "i2", "dim": 1, "b": 2})
    assert r.status_code == 200
    jsonschema.validate(r.json(), _schema("control-response.schema.json"))


def test_meta_response_validates_against_shared_schema(served):
    client, *_ = served
    jsonschema.validate(client.get("/meta").json(),
                        _schema("meta-response.schema.json"))


def test_error_bodies_validate_against_shared_schema(served):
    client, *_ = served
    schema = _schema("error-body.schema.json")
    jsonschema.validate(client.get("/items/nope/neighbors").json(), schema)
    jsonschema.validate(
        client.post("/control", json={"item": "i1", "dim": 0, "b": 29}).json(),
        schema)
