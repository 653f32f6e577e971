"""Implicit-feedback corpus: ingestion, user splits, batching, and disk format.

Raw rating logs are binarized (rating >= threshold), users with too few
kept interactions are dropped, and items that end up unreferenced are
removed from the vocabulary. Held-out users are split into validation and
test halves; each held-out user's row is further divided into a fold-in
part (shown to the encoder) and a held-out part (ranked against).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyCorpusError, InvalidSplitError, ParseError

MAGIC = b"MCOR1"


@dataclass
class InteractionMatrix:
    """Sparse binary user x item adoption data."""

    n_users: int
    n_items: int
    rows: list  # per-user sorted ndarray of adopted item indices
    user_vocab: list  # dense index -> external id
    item_vocab: list

    def validate(self):
        if len(self.rows) != self.n_users:
            raise DataError("row count does not match n_users")
        for u, row in enumerate(self.rows):
            if len(row) == 0:
                raise DataError(f"user {u} has an empty row")
            if np.any(np.diff(row) <= 0):
                raise DataError(f"user {u} row is not strictly increasing")
            if row[-1] >= self.n_items or row[0] < 0:
                raise DataError(f"user {u} row has out-of-range item index")

    @property
    def n_interactions(self) -> int:
        return sum(len(r) for r in self.rows)


@dataclass
class SplitSpec:
    """Disjoint user partition plus per-held-out-user fold-in item sets."""

    train_users: np.ndarray
    validation_users: np.ndarray
    test_users: np.ndarray
    foldin_fraction: float
    foldin: dict  # held-out user index -> sorted ndarray of fold-in item indices
    seed: int

    def heldout_items(self, m: InteractionMatrix, user: int) -> np.ndarray:
        return np.setdiff1d(m.rows[user], self.foldin[user], assume_unique=True)


def _sniff(first_line: str):
    """Return (delimiter, has_header) for a ratings file."""
    delim = "\t" if first_line.count("\t") >= first_line.count(",") else ","
    fields = first_line.rstrip("\n").split(delim)
    has_header = False
    if len(fields) >= 3:
        try:
            float(fields[2])
        except ValueError:
            has_header = True
    return delim, has_header


def load_ratings(path, rating_threshold: float = 4.0, min_items_per_user: int = 5) -> InteractionMatrix:
    """Parse a delimited (user, item, rating, timestamp) log into a binary corpus.

    Keeps interactions with rating >= threshold, drops users left with fewer
    than ``min_items_per_user`` of them, then drops unreferenced items. Dense
    indices follow first appearance among surviving interactions.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"ratings file not found: {path}")

    kept = []  # (user_ext, item_ext) in file order
    per_user = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first:
            raise EmptyCorpusError("ratings file is empty")
        delim, has_header = _sniff(first)
        lines = fh if has_header else _chain_first(first, fh)
        for line_no, line in enumerate(lines, start=2 if has_header else 1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split(delim)
            if len(fields) < 3:
                raise ParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
            user, item = fields[0].strip(), fields[1].strip()
            try:
                rating = float(fields[2])
            except ValueError as exc:
                raise ParseError(line_no, f"bad rating {fields[2]!r}") from exc
            if not user or not item:
                raise ParseError(line_no, "empty user or item id")
            if rating >= rating_threshold:
                key = (user, item)
                seen = per_user.setdefault(user, set())
                if item not in seen:  # duplicate adoptions collapse to one
                    seen.add(item)
                    kept.append(key)

    surviving = {u for u, items in per_user.items() if len(items) >= min_items_per_user}
    if not surviving:
        raise EmptyCorpusError("no users survive the rating/min-items filters")

    user_index, item_index = {}, {}
    user_vocab, item_vocab = [], []
    row_sets = []
    for user, item in kept:
        if user not in surviving:
            continue
        if user not in user_index:
            user_index[user] = len(user_vocab)
            user_vocab.append(user)
            row_sets.append([])
        if item not in item_index:
            item_index[item] = len(item_vocab)
            item_vocab.append(item)
        row_sets[user_index[user]].append(item_index[item])

    rows = [np.array(sorted(r), dtype=np.int32) for r in row_sets]
    m = InteractionMatrix(
        n_users=len(user_vocab),
        n_items=len(item_vocab),
        rows=rows,
        user_vocab=user_vocab,
        item_vocab=item_vocab,
    )
    m.validate()
    return m


def _chain_first(first, fh):
    yield first
    yield from fh


def make_split(m: InteractionMatrix, n_heldout: int, foldin_fraction: float = 0.8,
               seed: int = 0) -> SplitSpec:
    """Hold out ``n_heldout`` users, half validation / half test, fold-in per user."""
    if n_heldout >= m.n_users:
        raise InvalidSplitError(f"n_heldout={n_heldout} >= n_users={m.n_users}")
    if n_heldout < 2 or n_heldout % 2 != 0:
        raise InvalidSplitError("n_heldout must be even and >= 2")
    if not 0.0 < foldin_fraction < 1.0:
        raise InvalidSplitError("foldin_fraction must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(m.n_users)
    heldout = perm[:n_heldout]
    validation = np.sort(heldout[: n_heldout // 2])
    test = np.sort(heldout[n_heldout // 2:])
    train = np.sort(perm[n_heldout:])

    foldin = {}
    for u in np.sort(heldout):
        row = m.rows[u]
        if len(row) < 2:
            raise InvalidSplitError(f"held-out user {u} has fewer than 2 items")
        n_in = int(np.ceil(foldin_fraction * len(row)))
        n_in = min(n_in, len(row) - 1)  # both parts stay nonempty
        pick = rng.permutation(len(row))[:n_in]
        foldin[int(u)] = np.sort(row[pick])

    return SplitSpec(
        train_users=train.astype(np.int64),
        validation_users=validation.astype(np.int64),
        test_users=test.astype(np.int64),
        foldin_fraction=foldin_fraction,
        foldin=foldin,
        seed=seed,
    )


def minibatches(m: InteractionMatrix, users, batch_size: int, seed: int):
    """Yield per-epoch lists of user-index batches, reshuffled each epoch.

    The stream is infinite; epoch e's order depends only on (seed, e).
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    users = np.asarray(users, dtype=np.int64)
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(users)
        yield [perm[i: i + batch_size] for i in range(0, len(perm), batch_size)]


# ----------------------------------------------------------------------------
# Disk format


def save_corpus(m: InteractionMatrix, path):
    """Binary layout: magic, n_users/n_items u64 LE, row offsets, u32 indices,
    then the two vocabularies as adjacent JSON arrays."""
    offsets = np.zeros(m.n_users + 1, dtype="<u8")
    for u, row in enumerate(m.rows):
        offsets[u + 1] = offsets[u] + len(row)
    indices = np.concatenate([r.astype("<u4") for r in m.rows]) if m.rows else np.array([], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", m.n_users, m.n_items))
        fh.write(offsets.tobytes())
        fh.write(indices.tobytes())
        fh.write(json.dumps(m.user_vocab, separators=(",", ":")).encode("utf-8"))
        fh.write(json.dumps(m.item_vocab, separators=(",", ":")).encode("utf-8"))


def load_corpus(path) -> InteractionMatrix:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    blob = path.read_bytes()
    if blob[:5] != MAGIC:
        raise DataError(f"bad corpus magic in {path}")
    n_users, n_items = struct.unpack_from("<QQ", blob, 5)
    off = 5 + 16
    offsets = np.frombuffer(blob, dtype="<u8", count=n_users + 1, offset=off)
    off += offsets.nbytes
    total = int(offsets[-1])
    indices = np.frombuffer(blob, dtype="<u4", count=total, offset=off)
    off += indices.nbytes
    decoder = json.JSONDecoder()
    tail = blob[off:].decode("utf-8")
    user_vocab, end = decoder.raw_decode(tail)
    item_vocab, _ = decoder.raw_decode(tail, end)
    rows = [indices[offsets[u]: offsets[u + 1]].astype(np.int32) for u in range(n_users)]
    m = InteractionMatrix(n_users=n_users, n_items=n_items, rows=rows,
                          user_vocab=user_vocab, item_vocab=item_vocab)
    m.validate()
    return m


def save_split(split: SplitSpec, path):
    payload = {
        "seed": split.seed,
        "foldin_fraction": split.foldin_fraction,
        "train_users": split.train_users.tolist(),
        "validation_users": split.validation_users.tolist(),
        "test_users": split.test_users.tolist(),
        "foldin": {str(u): v.tolist() for u, v in split.foldin.items()},
    }
    Path(path).write_text(json.dumps(payload, separators=(",", ":"), sort_keys=True))


def load_split(path) -> SplitSpec:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    payload = json.loads(path.read_text())
    return SplitSpec(
        train_users=np.array(payload["train_users"], dtype=np.int64),
        validation_users=np.array(payload["validation_users"], dtype=np.int64),
        test_users=np.array(payload["test_users"], dtype=np.int64),
        foldin_fraction=payload["foldin_fraction"],
        foldin={int(u): np.array(v, dtype=np.int32) for u, v in payload["foldin"].items()},
        seed=payload["seed"],
    )


def load_corpus_dir(directory):
    """Load the (corpus, split) pair written by ``macrid prep``."""
    directory = Path(directory)
    return load_corpus(directory / "corpus.mcor"), load_split(directory / "split.json")
