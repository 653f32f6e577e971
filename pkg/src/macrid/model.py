"""Prototype-based disentangled VAE over implicit feedback.

Items are softly assigned to K concepts by cosine similarity against
learned prototypes (Gumbel-Softmax relaxed during training, argmax one-hot
at inference). A shared MLP encodes, per concept, the normalized weighted
bag of a user's context vectors into a unit-norm Gaussian mean and a
deviation scaled off the prior's sigma0. The decoder scores items through
an exp-cosine mixture gated by the concept assignment, normalized with a
(possibly sampled) softmax over the catalog.

All differentiable paths are built on :mod:`macrid.numerics` tensors so the
same graph serves training (with gradients) and inference (constants).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nm
from .errors import DataError, DimensionError, MacridError, NumericError
from .numerics import Tensor

LOG_SIGMA_CLAMP = 80.0  # clamp b so -b/2 stays in [-40, 40]
ASSIGNMENT_FLOOR = 1e-30  # keeps the decoder's log of mixture weights finite
FULL_SOFTMAX_MAX_ITEMS = 20000
CKPT_MAGIC = b"MCRD1"


@dataclass
class HyperParams:
    """Training-time knobs. ``dropout_keep`` is a keep probability."""

    k: int = 7
    d: int = 100
    beta: float = 1.0
    sigma0: float = 0.1
    gumbel_temp: float = 1.0
    lr: float = 1e-3
    l2_reg: float = 0.0
    dropout_keep: float = 0.5
    hidden_layers: int = 0
    hidden_width: int = 100
    neg_samples: object = None  # int, "full", or None = full softmax up to
    tau: float = 0.1            # FULL_SOFTMAX_MAX_ITEMS items, 1000 negatives beyond

    def validate(self):
        if self.k < 1 or self.d < 2:
            raise MacridError("need k >= 1 and d >= 2")
        if self.tau <= 0 or self.sigma0 <= 0 or self.gumbel_temp <= 0:
            raise MacridError("tau, sigma0 and gumbel_temp must be positive")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise MacridError("dropout_keep must lie in (0, 1]")
        if self.hidden_layers not in (0, 1, 2, 3):
            raise MacridError("hidden_layers must be 0..3")
        if self.neg_samples not in (None, "full") and int(self.neg_samples) < 1:
            raise MacridError("neg_samples must be None, 'full', or a positive count")


@dataclass
class ConceptAssignment:
    """Per-item categorical weights over the K concepts."""

    weights: np.ndarray  # (M, K), rows sum to 1
    hard: bool

    def validate(self):
        sums = self.weights.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            raise MacridError("assignment rows must sum to 1")
        if self.hard:
            if not np.all(np.isin(self.weights, (0.0, 1.0))) or \
                    not np.all(np.count_nonzero(self.weights, axis=1) == 1):
                raise MacridError("hard assignment rows must be one-hot")

    @property
    def concepts(self) -> np.ndarray:
        return np.argmax(self.weights, axis=1)


@dataclass
class UserPosterior:
    mu: np.ndarray  # (K, d), unit-norm rows
    sigma: np.ndarray  # (K, d), positive
    z: np.ndarray  # (K, d)


@dataclass
class ModelParams:
    prototypes: np.ndarray  # (K, d)
    item_reps: np.ndarray  # (M, d)
    context_reps: np.ndarray  # (M, d)
    mlp_weights: list  # (fan_in, fan_out) each
    mlp_biases: list
    tau: float = 0.1
    sigma0: float = 0.1
    similarity: str = "cosine"

    @property
    def n_concepts(self) -> int:
        return self.prototypes.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_reps.shape[0]

    @property
    def dim(self) -> int:
        return self.item_reps.shape[1]

    @property
    def hidden_sizes(self) -> list:
        return [w.shape[1] for w in self.mlp_weights[:-1]]

    def validate(self):
        k, d, m = self.n_concepts, self.dim, self.n_items
        if k < 1 or d < 2 or m < k:
            raise MacridError(f"invalid sizes K={k}, d={d}, M={m}")
        if self.tau <= 0 or self.sigma0 <= 0:
            raise MacridError("tau and sigma0 must be positive")
        if self.similarity not in ("cosine", "inner"):
            raise MacridError(f"unknown similarity {self.similarity!r}")
        for arr in self.arrays().values():
            if not np.isfinite(arr).all():
                raise NumericError("model parameters contain non-finite values")
        if self.mlp_weights[0].shape[0] != d or self.mlp_weights[-1].shape[1] != 2 * d:
            raise DimensionError("mlp must map d -> 2d")

    def arrays(self) -> dict:
        """Ordered name -> ndarray view of every trainable tensor."""
        out = {"prototypes": self.prototypes, "item_reps": self.item_reps,
               "context_reps": self.context_reps}
        for i, (w, b) in enumerate(zip(self.mlp_weights, self.mlp_biases)):
            out[f"mlp_w{i}"] = w
            out[f"mlp_b{i}"] = b
        return out

    def tensors(self, requires_grad: bool = False) -> dict:
        return {name: Tensor(arr, requires_grad=requires_grad, name=name)
                for name, arr in self.arrays().items()}

    def param_count(self) -> int:
        return sum(a.size for a in self.arrays().values())

    def copy(self) -> "ModelParams":
        return replace(
            self,
            prototypes=self.prototypes.copy(),
            item_reps=self.item_reps.copy(),
            context_reps=self.context_reps.copy(),
            mlp_weights=[w.copy() for w in self.mlp_weights],
            mlp_biases=[b.copy() for b in self.mlp_biases],
        )

    def astype(self, dtype) -> "ModelParams":
        return replace(
            self,
            prototypes=self.prototypes.astype(dtype),
            item_reps=self.item_reps.astype(dtype),
            context_reps=self.context_reps.astype(dtype),
            mlp_weights=[w.astype(dtype) for w in self.mlp_weights],
            mlp_biases=[b.astype(dtype) for b in self.mlp_biases],
        )


def mlp_layer_sizes(d: int, hidden_layers: int, hidden_width: int) -> list:
    dims = [d] + [hidden_width] * hidden_layers + [2 * d]
    return list(zip(dims[:-1], dims[1:]))


def init_params(n_items: int, hp: HyperParams, seed: int,
                similarity: str = "cosine") -> ModelParams:
    """Normal init with deviation 1/sqrt(d); prototypes copy K distinct items."""
    hp.validate()
    if n_items < hp.k:
        raise MacridError(f"need at least K={hp.k} items, got {n_items}")
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(hp.d)
    item_reps = rng.normal(0.0, std, size=(n_items, hp.d)).astype(np.float32)
    context_reps = rng.normal(0.0, std, size=(n_items, hp.d)).astype(np.float32)
    anchor = rng.choice(n_items, size=hp.k, replace=False)
    prototypes = item_reps[anchor].copy()
    weights, biases = [], []
    for fan_in, fan_out in mlp_layer_sizes(hp.d, hp.hidden_layers, hp.hidden_width):
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)).astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    params = ModelParams(prototypes=prototypes, item_reps=item_reps,
                         context_reps=context_reps, mlp_weights=weights,
                         mlp_biases=biases, tau=hp.tau, sigma0=hp.sigma0,
                         similarity=similarity)
    params.validate()
    return params


# ----------------------------------------------------------------------------
# Graph builders (shared by training and inference)


def _similarity_graph(a: Tensor, b: Tensor, tau: float, similarity: str) -> Tensor:
    """Rows-of-a vs rows-of-b similarity, scaled by 1/tau."""
    if similarity == "cosine":
        raw = nm.matmul(nm.rownorm(a), nm.transpose(nm.rownorm(b)))
    else:
        raw = nm.matmul(a, nm.transpose(b))
    return nm.scale(raw, 1.0 / tau)


def _prototype_logits_graph(pt: dict, params: ModelParams) -> Tensor:
    return _similarity_graph(pt["item_reps"], pt["prototypes"], params.tau,
                             params.similarity)


def prototype_logits(params: ModelParams) -> np.ndarray:
    """(M, K) matrix of similarity(h_i, m_k)/tau."""
    return _prototype_logits_graph(params.tensors(), params).data


def _gumbel_softmax_graph(logits: Tensor, temperature: float,
                          gumbel: np.ndarray) -> Tensor:
    noisy = nm.add(logits, Tensor(gumbel.astype(logits.dtype, copy=False)))
    return nm.softmax(nm.scale(noisy, 1.0 / temperature))


def sample_assignment(logits: np.ndarray, temperature: float, mode: str,
                      rng: np.random.Generator | None = None) -> ConceptAssignment:
    """Soft Gumbel-Softmax rows in train mode, argmax one-hot rows otherwise."""
    m, k = logits.shape
    if mode == "train":
        if temperature <= 0:
            raise MacridError("gumbel temperature must be positive in train mode")
        if rng is None:
            raise MacridError("train-mode sampling needs an rng")
        gumbel = _gumbel_noise(rng, (m, k))
        weights = _gumbel_softmax_graph(
            Tensor(np.asarray(logits, dtype=np.float32)), temperature, gumbel).data
        return ConceptAssignment(weights=weights, hard=False)
    weights = np.zeros((m, k), dtype=np.float32)
    weights[np.arange(m), np.argmax(logits, axis=1)] = 1.0
    return ConceptAssignment(weights=weights, hard=True)


def _gumbel_noise(rng, shape):
    u = rng.uniform(1e-12, 1.0, size=shape)
    return -np.log(-np.log(u))


def _rows_matrix(rows, n_items: int, dtype) -> np.ndarray:
    x = np.zeros((len(rows), n_items), dtype=dtype)
    for i, row in enumerate(rows):
        if len(row) == 0:
            raise MacridError("encode requires nonempty user rows")
        x[i, np.asarray(row)] = 1.0
    return x


def _mlp_graph(x: Tensor, pt: dict, n_layers: int, dropout_masks) -> Tensor:
    """Dropout precedes every layer except the last; tanh on hidden outputs."""
    for layer in range(n_layers):
        if dropout_masks is not None and layer < n_layers - 1:
            x = nm.dropout_apply(x, dropout_masks[layer])
        x = nm.add(nm.matmul(x, pt[f"mlp_w{layer}"]), pt[f"mlp_b{layer}"])
        if layer < n_layers - 1:
            x = nm.tanh(x)
    return x


def _encode_graph(rows, c_t: Tensor, pt: dict, params: ModelParams, hp: HyperParams,
                  mode: str, rng):
    """Returns (mu, sigma, z, kl) tensors with shapes (B,K,d)x3 and (B,)."""
    k, d = params.n_concepts, params.dim
    dtype = pt["item_reps"].dtype
    b = len(rows)
    x = Tensor(_rows_matrix(rows, params.n_items, dtype), name="rows")

    weighted = nm.mul(nm.reshape(c_t, (params.n_items, k, 1)),
                      nm.reshape(pt["context_reps"], (params.n_items, 1, d)))
    numer = nm.reshape(nm.matmul(x, nm.reshape(weighted, (params.n_items, k * d))),
                       (b, k, d))
    sq = nm.matmul(x, nm.mul(c_t, c_t))
    denom = nm.reshape(nm.sqrt(nm.shift(sq, nm.EPS_DIV)), (b, k, 1))
    v = nm.div(numer, denom)

    n_layers = len(params.mlp_weights)
    masks = None
    if mode == "train" and hp.dropout_keep < 1.0 and n_layers > 1:
        keep = hp.dropout_keep
        masks = [
            (rng.random((b * k, params.mlp_weights[layer].shape[0])) < keep) / keep
            for layer in range(n_layers - 1)
        ]
    out = _mlp_graph(nm.reshape(v, (b * k, d)), pt, n_layers, masks)

    mu = nm.rownorm(nm.slice_last(out, 0, d))
    b_half = nm.clip(nm.slice_last(out, d, 2 * d), -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
    sigma = nm.scale(nm.exp(nm.scale(b_half, -0.5)), params.sigma0)

    if mode == "train":
        eps = Tensor(rng.standard_normal((b * k, d)).astype(dtype))
        z = nm.add(mu, nm.mul(eps, sigma))
    else:
        z = mu

    # KL(N(mu, diag(sigma)^2) || N(0, sigma0^2 I)), summed per user
    s0 = params.sigma0
    elem = nm.shift(
        nm.add(nm.scale(nm.log(sigma), -1.0),
               nm.scale(nm.add(nm.mul(sigma, sigma), nm.mul(mu, mu)),
                        1.0 / (2.0 * s0 * s0))),
        np.log(s0) - 0.5)
    kl = nm.sum_axis(nm.reshape(elem, (b, k * d)), axis=1)

    to_bkd = lambda t: nm.reshape(t, (b, k, d))
    return to_bkd(mu), to_bkd(sigma), to_bkd(z), kl


def encode(rows, assignment: ConceptAssignment, params: ModelParams, hp: HyperParams,
           mode: str = "infer", rng: np.random.Generator | None = None):
    """Per-user posteriors from item lists under a fixed concept assignment."""
    if mode == "train" and rng is None:
        raise MacridError("train-mode encoding needs an rng")
    mu, sigma, z, _ = _encode_graph(
        rows, Tensor(assignment.weights), params.tensors(), params, hp, mode, rng)
    return [UserPosterior(mu=mu.data[i].copy(), sigma=sigma.data[i].copy(),
                          z=z.data[i].copy()) for i in range(len(rows))]


def _decode_raw_graph(z_t: Tensor, c_t: Tensor, pt: dict, params: ModelParams) -> Tensor:
    """(B, M) unnormalized log-scores ln sum_k c_{i,k} exp(sim_k / tau)."""
    b = z_t.shape[0]
    k, m = params.n_concepts, params.n_items
    sim = nm.reshape(
        _similarity_graph(nm.reshape(z_t, (b * k, params.dim)), pt["item_reps"],
                          params.tau, params.similarity),
        (b, k, m))
    ln_c = nm.log(nm.shift(nm.reshape(nm.transpose(c_t), (1, k, m)), ASSIGNMENT_FLOOR))
    arg = nm.add(sim, ln_c)
    peak = arg.data.max(axis=1, keepdims=True)  # constant shift, exact under lse
    total = nm.sum_axis(nm.exp(nm.sub(arg, Tensor(peak))), axis=1)
    return nm.add(nm.log(total), Tensor(peak.reshape(b, m)))


def _decode_logp_graph(z_t: Tensor, c_t: Tensor, pt: dict, params: ModelParams,
                       candidate_mask: np.ndarray | None = None) -> Tensor:
    raw = _decode_raw_graph(z_t, c_t, pt, params)
    if candidate_mask is not None:
        gate = np.where(candidate_mask, 0.0, -1e30).astype(raw.dtype)
        raw = nm.add(raw, Tensor(gate))
    return nm.log_softmax(raw)


def decode_scores(posterior: UserPosterior, assignment: ConceptAssignment,
                  params: ModelParams, candidates) -> np.ndarray:
    """Log-probabilities over the given candidate item set."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise MacridError("candidate set must be nonempty")
    z_t = Tensor(posterior.z[None, :, :])
    raw = _decode_raw_graph(z_t, Tensor(assignment.weights), params.tensors(), params)
    picked = raw.data[0, candidates]
    return nm.log_softmax(Tensor(picked)).data


def score_all_items(posteriors_z: np.ndarray, assignment: ConceptAssignment,
                    params: ModelParams) -> np.ndarray:
    """(B, M) full-softmax log-probabilities for a batch of codes (B,K,d)."""
    return _decode_logp_graph(Tensor(posteriors_z), Tensor(assignment.weights),
                              params.tensors(), params).data


def kl_gaussian(posterior: UserPosterior, sigma0: float) -> float:
    sigma = posterior.sigma
    if np.any(sigma <= 0):
        raise MacridError("sigma entries must be positive")
    mu = posterior.mu
    val = np.log(sigma0 / sigma) + (sigma ** 2 + mu ** 2) / (2.0 * sigma0 ** 2) - 0.5
    return float(val.sum(dtype=np.float64))


def resolve_neg_samples(setting, n_items: int):
    """None means: full softmax for small catalogs, 1000 negatives otherwise."""
    if setting is None:
        return "full" if n_items <= FULL_SOFTMAX_MAX_ITEMS else 1000
    return setting


def _negative_mask(rows, n_items: int, n_neg: int, rng) -> np.ndarray:
    """Positives plus n_neg uniformly drawn non-adopted items, per user."""
    mask = np.zeros((len(rows), n_items), dtype=bool)
    for i, row in enumerate(rows):
        mask[i, np.asarray(row)] = True
        perm = rng.permutation(n_items)
        negs = perm[~mask[i, perm]][:n_neg]
        mask[i, negs] = True
    return mask


def loss(rows, params: ModelParams, hp: HyperParams, mode: str = "train",
         rng: np.random.Generator | None = None, with_grads: bool = True):
    """Minimization objective and gradients for one minibatch of user rows.

    mean_u[ -sum_{i in row} ln p_{u,i} + beta * KL_u ] + l2_reg * ||theta||^2.
    One concept assignment is sampled per call. Noise draw order: Gumbel,
    dropout masks, eps, negative samples.
    """
    if not rows:
        raise MacridError("loss requires a nonempty batch")
    if mode == "train" and rng is None:
        raise MacridError("train-mode loss needs an rng")
    hp.validate()
    pt = params.tensors(requires_grad=with_grads)
    dtype = params.item_reps.dtype

    logits = _prototype_logits_graph(pt, params)
    if mode == "train":
        gumbel = _gumbel_noise(rng, logits.shape).astype(dtype)
        c_t = _gumbel_softmax_graph(logits, hp.gumbel_temp, gumbel)
    else:
        hard = np.zeros(logits.shape, dtype=dtype)
        hard[np.arange(logits.shape[0]), np.argmax(logits.data, axis=1)] = 1.0
        c_t = Tensor(hard)

    mu, sigma, z, kl = _encode_graph(rows, c_t, pt, params, hp, mode, rng)

    mask = None
    n_neg = resolve_neg_samples(hp.neg_samples, params.n_items)
    if mode == "train" and n_neg != "full":
        mask = _negative_mask(rows, params.n_items, int(n_neg), rng)
    logp = _decode_logp_graph(z, c_t, pt, params, mask)

    x = Tensor(_rows_matrix(rows, params.n_items, dtype))
    recon = nm.sum_axis(nm.mul(logp, x), axis=1)  # (B,)
    per_user = nm.add(nm.scale(recon, -1.0), nm.scale(kl, hp.beta))
    total = nm.mean_axis(per_user, axis=0)
    if hp.l2_reg > 0.0:
        reg = None
        for t in pt.values():
            term = nm.sumall(nm.mul(t, t))
            reg = term if reg is None else nm.add(reg, term)
        total = nm.add(total, nm.scale(reg, hp.l2_reg))

    if not with_grads:
        return float(total.data), {}
    total.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in pt.items()}
    return float(total.data), grads


# ----------------------------------------------------------------------------
# Checkpoint format


def save_checkpoint(params: ModelParams, item_vocab: list, path):
    """Magic, u64 header length, JSON header, float32 LE arrays in fixed order."""
    header = {
        "M": params.n_items,
        "K": params.n_concepts,
        "d": params.dim,
        "tau": params.tau,
        "sigma0": params.sigma0,
        "hidden": params.hidden_sizes,
        "item_vocab": list(item_vocab),
        "similarity": params.similarity,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (ModelParams, item_vocab)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:5] != CKPT_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    (hlen,) = struct.unpack_from("<Q", blob, 5)
    header = json.loads(blob[13: 13 + hlen].decode("utf-8"))
    m, k, d = header["M"], header["K"], header["d"]
    dims = [d] + list(header["hidden"]) + [2 * d]
    sizes = list(zip(dims[:-1], dims[1:]))
    off = 13 + hlen

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
        return arr

    prototypes = take((k, d))
    item_reps = take((m, d))
    context_reps = take((m, d))
    weights, biases = [], []
    for fan_in, fan_out in sizes:
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    params = ModelParams(prototypes=prototypes, item_reps=item_reps,
                         context_reps=context_reps, mlp_weights=weights,
                         mlp_biases=biases, tau=header["tau"], sigma0=header["sigma0"],
                         similarity=header.get("similarity", "cosine"))
    params.validate()
    return params, header["item_vocab"]
