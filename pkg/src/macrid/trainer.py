"""Training loop, early stopping, adaptive concept pruning, random search.

Each step samples one concept assignment, encodes the batch, samples codes,
decodes, and applies a bias-corrected Adam update on the minimization loss.
Validation NDCG@100 (argmax assignment, z = mu) drives early stopping and
model selection; the best-epoch snapshot is returned.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics as mt
from .corpus import InteractionMatrix, SplitSpec, minibatches
from .errors import MacridError, NumericError
from .model import (HyperParams, ModelParams, init_params, loss,
                    prototype_logits, save_checkpoint)
from .numerics import adam_update, init_adam

MAX_EPOCHS_DEFAULT = 200
PATIENCE_DEFAULT = 20
BATCH_DEFAULT = 256
ADAPTIVE_K_THRESHOLD_DEFAULT = 0.05

# Random-search ranges (log-uniform for lr and l2)
SEARCH_SPACE = {
    "sigma0": (0.075, 0.5),
    "beta": (0.0, 100.0),
    "k": (1, 20),
    "lr": (1e-8, 1.0),
    "l2_reg": (1e-12, 1.0),
    "dropout_keep": (0.05, 1.0),
    "hidden_layers": (0, 3),
    "hidden_width": tuple(range(50, 701, 50)),
}


@dataclass
class TrainConfig:
    hp: HyperParams
    epochs: int = MAX_EPOCHS_DEFAULT
    batch_size: int = BATCH_DEFAULT
    seed: int = 0
    patience: int = PATIENCE_DEFAULT
    checkpoint_dir: str | None = None
    similarity: str = "cosine"
    adaptive_k_threshold: float | None = None  # None disables shrinking

    def validate(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise MacridError("epochs, patience and batch_size must be >= 1")
        self.hp.validate()


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    val_ndcg: list = field(default_factory=list)
    best_epoch: int = 0
    seconds: float = 0.0
    final_k: int = 0
    param_count: int = 0

    def best_val(self) -> float:
        return self.val_ndcg[self.best_epoch - 1] if self.best_epoch else float("-inf")


def parameter_budget(params: ModelParams):
    """(total trainable entries, reference budget 2*M*d)."""
    return params.param_count(), 2 * params.n_items * params.dim


def train(corpus: InteractionMatrix, split: SplitSpec, cfg: TrainConfig,
          progress=None):
    """Run the full procedure and return (best ModelParams, TrainReport)."""
    cfg.validate()
    if len(split.train_users) == 0:
        raise MacridError("training split is empty")
    t0 = time.perf_counter()

    init_seed, noise_seed, shuffle_seed = (
        int(s) for s in np.random.SeedSequence(cfg.seed).generate_state(3))
    params = init_params(corpus.n_items, cfg.hp, init_seed, similarity=cfg.similarity)
    state = init_adam(params.arrays(), lr=cfg.hp.lr)
    noise_rng = np.random.default_rng(noise_seed)
    stream = minibatches(corpus, split.train_users, cfg.batch_size, shuffle_seed)

    report = TrainReport(param_count=params.param_count())
    best = params.copy()
    best_ndcg = -np.inf
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        batches = next(stream)
        epoch_loss, seen = 0.0, 0
        for step, batch in enumerate(batches, start=1):
            rows = [corpus.rows[u] for u in batch]
            try:
                value, grads = loss(rows, params, cfg.hp, mode="train", rng=noise_rng)
                adam_update(params.arrays(), grads, state)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            epoch_loss += value * len(rows)
            seen += len(rows)
        epoch_loss /= seen

        if cfg.adaptive_k_threshold is not None and params.n_concepts >= 2:
            params, removed = adaptive_k(params, cfg.adaptive_k_threshold)
            if removed is not None:
                for key in ("m", "v"):
                    getattr(state, key)["prototypes"] = np.delete(
                        getattr(state, key)["prototypes"], removed, axis=0)

        ndcg = mt.evaluate(params, corpus, split, "validation", cfg.hp).mean("ndcg100")
        report.epoch_losses.append(epoch_loss)
        report.val_ndcg.append(ndcg)
        if progress is not None:
            progress(epoch, epoch_loss, ndcg)

        if ndcg > best_ndcg:
            best_ndcg = ndcg
            best = params.copy()
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    report.seconds = time.perf_counter() - t0
    report.final_k = best.n_concepts
    if cfg.checkpoint_dir is not None:
        out = Path(cfg.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, corpus.item_vocab, out / "best.mcrd")
    return best, report


def adaptive_k(params: ModelParams, threshold: float):
    """Drop one prototype of the closest pair (higher index) when the minimum
    pairwise Jensen-Shannon divergence between per-concept item distributions
    falls below the threshold. Returns (params, removed index or None)."""
    k = params.n_concepts
    if k < 2:
        raise MacridError("adaptive_k requires at least 2 prototypes")
    logits = prototype_logits(params).astype(np.float64)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)  # p(c_i = k) per item
    cols = probs / probs.sum(axis=0, keepdims=True)  # p_{i|k} over items

    best_pair, best_js = None, np.inf
    for i in range(k):
        for j in range(i + 1, k):
            js = _jensen_shannon(cols[:, i], cols[:, j])
            if js < best_js:
                best_js, best_pair = js, (i, j)
    if best_js >= threshold:
        return params, None
    removed = best_pair[1]
    return replace(params, prototypes=np.delete(params.prototypes, removed, axis=0)), removed


def _jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def _kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def sample_hyperparams(rng: np.random.Generator, d: int = 100,
                       neg_samples=None) -> HyperParams:
    """One draw from the search space (uniform; log-uniform for lr and l2)."""
    lo, hi = SEARCH_SPACE["lr"]
    lr = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    lo, hi = SEARCH_SPACE["l2_reg"]
    l2 = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return HyperParams(
        k=int(rng.integers(SEARCH_SPACE["k"][0], SEARCH_SPACE["k"][1] + 1)),
        d=d,
        beta=float(rng.uniform(*SEARCH_SPACE["beta"])),
        sigma0=float(rng.uniform(*SEARCH_SPACE["sigma0"])),
        lr=lr,
        l2_reg=l2,
        dropout_keep=float(rng.uniform(*SEARCH_SPACE["dropout_keep"])),
        hidden_layers=int(rng.integers(SEARCH_SPACE["hidden_layers"][0],
                                       SEARCH_SPACE["hidden_layers"][1] + 1)),
        hidden_width=int(rng.choice(SEARCH_SPACE["hidden_width"])),
        neg_samples=neg_samples,
    )


def random_search(corpus: InteractionMatrix, split: SplitSpec, n_trials: int,
                  seed: int, base: TrainConfig | None = None, d: int = 100,
                  progress=None):
    """Uniformly sample configs from the search ranges; return the one with the
    best validation NDCG@100 along with all trial summaries."""
    if n_trials < 1:
        raise MacridError("n_trials must be >= 1")
    base = base or TrainConfig(hp=HyperParams(d=d))
    rng = np.random.default_rng(seed)
    trial_seeds = np.random.SeedSequence(seed).generate_state(n_trials)

    best_cfg, best_report, best_score = None, None, -np.inf
    trials = []
    for t in range(n_trials):
        hp = sample_hyperparams(rng, d=d, neg_samples=base.hp.neg_samples)
        cfg = replace(base, hp=hp, seed=int(trial_seeds[t]), checkpoint_dir=None)
        try:
            _, report = train(corpus, split, cfg)
            score = report.best_val()
            failure = None
        except NumericError as exc:  # diverged trial: score it out, keep searching
            report, score, failure = TrainReport(), -np.inf, str(exc)
        trials.append({"trial": t, "hp": vars(hp).copy(), "val_ndcg100": score,
                       "best_epoch": report.best_epoch, "failed": failure})
        if progress is not None:
            progress(t, hp, score)
        if score > best_score:
            best_score, best_cfg, best_report = score, cfg, report
    return best_cfg, best_report, trials
