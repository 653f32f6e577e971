"""Ranking metrics vs a brute-force oracle, independence, ARI, export."""

import numpy as np
import pytest

from conftest import make_random_corpus
from macrid.corpus import SplitSpec, make_split
from macrid.errors import DataError, MacridError
from macrid.metrics import (IndependenceScore, UserExport, cluster_agreement,
                            component_confidence, evaluate, export_embeddings,
                            independence, ndcg_at, parse_embedding_export,
                            rank_items, recall_at)
from macrid.model import (ConceptAssignment, HyperParams, decode_scores, encode,
                          init_params, prototype_logits, sample_assignment)


# ----------------------------------------------------------------------------
# Brute-force oracle: explicit sort with tie handling, direct DCG sums


def oracle_metrics(scores, relevant, ndcg_cut=100, recall_cuts=(20, 50)):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    dcg = 0.0
    for rank, item in enumerate(order[:ndcg_cut], start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = 0.0
    for rank in range(1, min(ndcg_cut, len(relevant)) + 1):
        ideal += 1.0 / np.log2(rank + 1)
    ndcg = dcg / ideal if ideal else 0.0
    recalls = []
    for cut in recall_cuts:
        hits = sum(1 for item in order[:cut] if item in relevant)
        recalls.append(hits / min(cut, len(relevant)))
    return ndcg, recalls[0], recalls[1]


def test_metrics_match_bruteforce_oracle_on_200_instances():
    rng = np.random.default_rng(0)
    for case in range(200):
        n = int(rng.integers(30, 300))
        scores = rng.normal(size=n)
        if case % 3 == 0:
            scores = np.round(scores, 1)  # force score ties
        relevant = set(rng.choice(n, size=int(rng.integers(1, 12)),
                                  replace=False).tolist())
        ranking = rank_items(scores)
        want = oracle_metrics(scores, relevant)
        got = (ndcg_at(ranking, relevant, 100),
               recall_at(ranking, relevant, 20),
               recall_at(ranking, relevant, 50))
        assert got == want, f"case {case}"


def test_ndcg_single_relevant_at_rank_three():
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    relevant = {2}
    assert abs(ndcg_at(rank_items(scores), relevant, 100) - 0.5) < 1e-12


def test_recall_divides_by_min_cutoff_relevant():
    scores = -np.arange(100, dtype=float)
    relevant = {0, 1, 2, 60, 70}  # 3 inside top-20, 5 held out
    assert recall_at(rank_items(scores), relevant, 20) == pytest.approx(0.6)


def test_ranking_ties_break_by_ascending_index():
    scores = np.array([1.0, 2.0, 2.0, 0.5])
    assert rank_items(scores).tolist() == [1, 2, 0, 3]


# ----------------------------------------------------------------------------
# Fold-in evaluation protocol


def _tiny_trained_setup(seed=0):
    corpus = make_random_corpus(seed=seed, n_users=12, n_items=20)
    split = make_split(corpus, 4, 0.8, seed=seed)
    hp = HyperParams(k=2, d=4, sigma0=0.1, dropout_keep=1.0, hidden_layers=0,
                     hidden_width=4, neg_samples="full")
    params = init_params(corpus.n_items, hp, seed=seed)
    return corpus, split, hp, params


def test_evaluate_matches_manual_protocol():
    corpus, split, hp, params = _tiny_trained_setup(seed=2)
    result = evaluate(params, corpus, split, "validation", hp)

    assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
    manual = []
    for u in split.validation_users:
        fold = split.foldin[int(u)]
        held = set(int(x) for x in split.heldout_items(corpus, int(u)))
        post = encode([fold], assignment, params, hp)[0]
        scores = decode_scores(post, assignment, params, np.arange(corpus.n_items))
        scores[fold] = -np.inf
        manual.append(ndcg_at(rank_items(scores), held, 100))
    assert np.allclose(result.ndcg100, manual, atol=1e-6)
    assert result.skipped == 0


def test_evaluate_never_ranks_foldin_items():
    corpus, split, hp, params = _tiny_trained_setup(seed=3)
    # craft item reps so fold-in items would otherwise dominate every ranking
    u = int(split.test_users[0])
    fold = split.foldin[u]
    assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
    post = encode([fold], assignment, params, hp)[0]
    params.item_reps[fold] = 50.0 * post.mu[assignment.concepts[fold[0]]]
    result = evaluate(params, corpus, split, "test", hp)
    assert np.all(result.recall20 <= 1.0)  # metrics remain well-defined
    # direct check: the excluded scores can never appear in the top ranks
    scores = decode_scores(
        encode([fold], assignment, params, hp)[0], assignment, params,
        np.arange(corpus.n_items))
    scores[fold] = -np.inf
    top = rank_items(scores)[: corpus.n_items - len(fold)]
    assert not set(fold.tolist()) & set(top.tolist()[:5])


def test_evaluate_skips_users_without_heldout(small_corpus):
    corpus, split = small_corpus
    hp = HyperParams(k=2, d=4, neg_samples="full")
    params = init_params(corpus.n_items, hp, seed=1)
    broken = SplitSpec(
        train_users=split.train_users,
        validation_users=split.validation_users,
        test_users=split.test_users,
        foldin_fraction=split.foldin_fraction,
        foldin=dict(split.foldin),
        seed=split.seed,
    )
    victim = int(broken.validation_users[0])
    broken.foldin[victim] = corpus.rows[victim].copy()  # nothing held out
    with pytest.warns(UserWarning):
        result = evaluate(params, corpus, broken, "validation", hp)
    assert result.skipped == 1
    assert len(result.ndcg100) == len(broken.validation_users) - 1


# ----------------------------------------------------------------------------
# Independence score


def test_independence_high_for_independent_gaussians():
    rng = np.random.default_rng(5)
    score = independence(rng.normal(size=(10_000, 6)))
    assert score.value >= 0.97
    assert score.corr.shape == (6, 6)
    assert np.allclose(np.diag(score.corr), 1.0)
    assert np.allclose(score.corr, score.corr.T)


def test_independence_zero_for_duplicated_column():
    x = np.random.default_rng(6).normal(size=(500, 1))
    score = independence(np.hstack([x, x]))
    assert abs(score.value) < 1e-9


def test_independence_one_hot_patterns_match_hand_oracle():
    table = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
    # Pearson by hand: means 0.25, cov = -1/16, var = 3/16 -> corr = -1/3
    score = independence(table)
    assert score.corr[0, 1] == pytest.approx(-1.0 / 3.0)
    assert score.value == pytest.approx(1.0 - 1.0 / 3.0)


def test_independence_affine_invariance():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(300, 4))
    a = independence(x).value
    b = independence(x * np.array([2.0, 5.0, 0.1, 7.0]) + 3.0).value
    assert a == pytest.approx(b, abs=1e-10)


def test_independence_constant_column_warns():
    x = np.random.default_rng(8).normal(size=(100, 3))
    x[:, 1] = 4.2
    with pytest.warns(UserWarning):
        score = independence(x)
    assert np.all(score.corr[1, [0, 2]] == 0)


def test_independence_rejects_single_dimension():
    with pytest.raises(MacridError):
        independence(np.ones((10, 1)))


# ----------------------------------------------------------------------------
# Cluster agreement (adjusted Rand index)


def ari_pair_oracle(pred, labels):
    n = len(pred)
    a = b = c = d = 0
    for i in range(n):
        for j in range(i + 1, n):
            sp = pred[i] == pred[j]
            st = labels[i] == labels[j]
            if sp and st:
                a += 1
            elif sp and not st:
                b += 1
            elif st:
                c += 1
            else:
                d += 1
    denom = (a + b) * (b + d) + (a + c) * (c + d)
    if denom == 0:
        return 1.0
    return 2.0 * (a * d - b * c) / denom


def _hard(pred, k):
    w = np.zeros((len(pred), k), dtype=np.float32)
    w[np.arange(len(pred)), pred] = 1.0
    return ConceptAssignment(weights=w, hard=True)


def test_ari_permutation_invariance():
    labels = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([2, 2, 0, 0, 1, 1])  # same clustering, renamed
    assert cluster_agreement(_hard(pred, 3), labels) == pytest.approx(1.0)


def test_ari_degenerate_single_cluster_is_zero():
    labels = np.array([0, 0, 0, 1, 1, 1])
    pred = np.zeros(6, dtype=int)
    assert cluster_agreement(_hard(pred, 2), labels) == pytest.approx(0.0)


def test_ari_matches_pair_counting_oracle():
    rng = np.random.default_rng(9)
    for _ in range(25):
        n = int(rng.integers(5, 40))
        pred = rng.integers(0, 4, size=n)
        labels = rng.integers(0, 3, size=n)
        got = cluster_agreement(_hard(pred, 4), labels)
        assert got == pytest.approx(ari_pair_oracle(pred, labels), abs=1e-12)


def test_ari_label_count_mismatch():
    with pytest.raises(DataError):
        cluster_agreement(_hard(np.array([0, 1]), 2), np.array([0, 1, 2]))


# ----------------------------------------------------------------------------
# Embedding export


def test_export_format_and_roundtrip(tmp_path):
    hp = HyperParams(k=1, d=2, neg_samples="full")
    params = init_params(3, hp, seed=10)
    assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
    post = encode([np.array([0, 2])], assignment, params, hp)[0]
    users = [UserExport(user_id="alice", posterior=post,
                        confidence=component_confidence(assignment, [0, 2]))]
    path = tmp_path / "emb.tsv"
    export_embeddings(params, assignment, users, ["x", "y", "z"], path)

    lines = path.read_text().strip("\n").split("\n")
    assert lines[0].startswith("# item:")
    item_lines = [l for l in lines[1:] if len(l.split("\t")) == 4]
    assert len(item_lines) == 3  # M=3 rows of (id, concept, v0, v1)

    items, users_parsed = parse_embedding_export(path)
    assert len(items) == 3 and len(users_parsed) == 1
    for (ext, concept, vals), i in zip(items, range(3)):
        assert ext == ["x", "y", "z"][i]
        assert concept == assignment.concepts[i]
        assert np.allclose(vals, params.item_reps[i], atol=1e-6)
    _, k, conf, mu = users_parsed[0]
    assert conf == pytest.approx(2.0)  # hard one-hot weights, two items
    assert np.allclose(mu, post.mu[0], atol=1e-6)


def test_export_zero_weight_component_confidence():
    hp = HyperParams(k=2, d=2, neg_samples="full")
    params = init_params(4, hp, seed=11)
    weights = np.zeros((4, 2), dtype=np.float32)
    weights[:, 0] = 1.0
    assignment = ConceptAssignment(weights=weights, hard=True)
    conf = component_confidence(assignment, [0, 1, 3])
    assert conf[0] == pytest.approx(3.0)
    assert conf[1] == pytest.approx(0.0)


def test_export_unwritable_path_raises(tmp_path):
    hp = HyperParams(k=1, d=2, neg_samples="full")
    params = init_params(3, hp, seed=12)
    assignment = sample_assignment(prototype_logits(params), 1.0, "infer")
    with pytest.raises(DataError):
        export_embeddings(params, assignment, [], ["a", "b", "c"],
                          tmp_path / "missing-dir" / "emb.tsv")
