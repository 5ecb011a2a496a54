"""Key-value store of (context vector -> next token) pairs with exact and
inverted-file kNN under squared L2.

Keys are the float32 context vectors produced by an eval-mode forward pass
over the training split, one per predictable position, laid out in corpus
order. Distances are always computed in float64 from the stored float32
keys; ties break toward the lower key index. The on-disk layout keeps the
key matrix at a fixed offset/stride so it can be memory-mapped directly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import EncodedSplit, batch_iter
from .errors import DataHashError, FormatError
from .hashing import sha256_hex
from .model import TransformerLM

DATASTORE_MAGIC = b"KNDS"
IVF_MAGIC = b"KNIV"
FORMAT_VERSION = 1
NULL_HASH = "0" * 64


@dataclass
class Datastore:
    keys: np.ndarray  # (N, d) float32
    values: np.ndarray  # (N,) int64 token ids
    checkpoint_hash: str = NULL_HASH  # sha256 hex of the source checkpoint

    def __post_init__(self) -> None:
        if self.keys.ndim != 2 or len(self.keys) != len(self.values):
            raise ValueError("keys must be (N, d) with one value per key")
        self._keys64: np.ndarray | None = None
        self._sqnorms: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    def keys_f64(self) -> tuple[np.ndarray, np.ndarray]:
        """Float64 view of the keys plus cached squared norms."""
        if self._keys64 is None:
            self._keys64 = np.asarray(self.keys, dtype=np.float64)
            self._sqnorms = np.einsum("nd,nd->n", self._keys64, self._keys64)
        return self._keys64, self._sqnorms

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(DATASTORE_MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        buf.write(struct.pack("<I", self.d))
        buf.write(struct.pack("<Q", self.n))
        buf.write(bytes.fromhex(self.checkpoint_hash))
        buf.write(np.ascontiguousarray(self.keys, dtype="<f4").tobytes())
        buf.write(self.values.astype("<u4").tobytes())
        return buf.getvalue()

    def content_hash(self) -> str:
        return sha256_hex(self.to_bytes())


@dataclass
class NeighborSet:
    indices: np.ndarray  # (k,) int64, distinct
    distances: np.ndarray  # (k,) float64 squared L2, non-decreasing
    values: np.ndarray  # (k,) int64 token ids

    def __len__(self) -> int:
        return len(self.indices)


def build_datastore(
    model: TransformerLM,
    split: EncodedSplit,
    bptt: int | None = None,
    window_batch: int = 8,
    checkpoint_hash: str = NULL_HASH,
    expected_vocab_hash: str | None = None,
) -> Datastore:
    """One (key=repr at t, value=token at t+1) pair per predictable position.

    Pairs appear exactly in the order batch_iter(split, 1, bptt) emits
    targets, i.e. corpus order minus the dropped tail. Windows are stacked
    ``window_batch`` at a time purely for forward-pass throughput.
    """
    if expected_vocab_hash is not None and split.vocab_hash and (
        split.vocab_hash != expected_vocab_hash
    ):
        raise DataHashError(
            f"split {split.name!r} was encoded with vocab {split.vocab_hash[:12]}..., "
            f"checkpoint expects {expected_vocab_hash[:12]}..."
        )
    if bptt is None:
        bptt = model.config.context_len
    model.eval()
    key_chunks: list[np.ndarray] = []
    val_chunks: list[np.ndarray] = []
    window_x: list[np.ndarray] = []
    window_y: list[np.ndarray] = []

    def flush() -> None:
        if not window_x:
            return
        x = torch.from_numpy(np.stack(window_x))
        with torch.no_grad():
            reprs = model(x).reprs
        d = reprs.shape[-1]
        key_chunks.append(reprs.reshape(-1, d).numpy().astype(np.float32, copy=True))
        val_chunks.append(np.concatenate(window_y))
        window_x.clear()
        window_y.clear()

    for x, y in batch_iter(split, 1, bptt):
        window_x.append(x[0])
        window_y.append(y[0])
        if len(window_x) == window_batch:
            flush()
    flush()
    keys = np.concatenate(key_chunks, axis=0)
    values = np.concatenate(val_chunks, axis=0).astype(np.int64)
    return Datastore(keys=keys, values=values, checkpoint_hash=checkpoint_hash)


# ---------------------------------------------------------------------------
# Exact search
# ---------------------------------------------------------------------------


def _topk_tied(dists: np.ndarray, cand_idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest-k by (distance, key index); exact even across tie boundaries."""
    n = len(dists)
    if k >= n:
        order = np.lexsort((cand_idx, dists))
        return cand_idx[order], dists[order]
    thr = np.partition(dists, k - 1)[k - 1]
    sel = np.flatnonzero(dists <= thr)
    order = np.lexsort((cand_idx[sel], dists[sel]))[:k]
    keep = sel[order]
    return cand_idx[keep], dists[keep]


def _sq_dists(store: Datastore, queries: np.ndarray) -> np.ndarray:
    """(n, N) squared L2 distances in float64 via the norm expansion."""
    keys64, sqnorms = store.keys_f64()
    q = np.asarray(queries, dtype=np.float64)
    d2 = sqnorms[None, :] - 2.0 * (q @ keys64.T)
    d2 += np.einsum("nd,nd->n", q, q)[:, None]
    np.maximum(d2, 0.0, out=d2)
    return d2


def exact_search(
    store: Datastore, queries: np.ndarray, k: int, chunk: int = 64
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batched exact kNN; returns per-query (indices, distances)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if store.n == 0:
        raise ValueError("empty datastore")
    all_idx = np.arange(store.n, dtype=np.int64)
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for lo in range(0, len(queries), chunk):
        d2 = _sq_dists(store, queries[lo : lo + chunk])
        for row in d2:
            out.append(_topk_tied(row, all_idx, k))
    return out


def exact_knn(store: Datastore, query: np.ndarray, k: int) -> NeighborSet:
    """The k nearest keys under squared L2; ties go to the lower key index;
    returns all N keys if k > N."""
    idx, dist = exact_search(store, np.asarray(query, dtype=np.float64)[None, :], k)[0]
    return NeighborSet(indices=idx, distances=dist, values=store.values[idx])


# ---------------------------------------------------------------------------
# IVF index
# ---------------------------------------------------------------------------


@dataclass
class IvfIndex:
    centroids: np.ndarray  # (C, d) float32
    lists: list[np.ndarray] = field(default_factory=list)  # int64 key indices
    store_hash: str = NULL_HASH

    @property
    def n_centroids(self) -> int:
        return len(self.centroids)


def _kmeans_pp_init(x: np.ndarray, n_centroids: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = np.empty((n_centroids, x.shape[1]), dtype=np.float64)
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, n_centroids):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[c] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[c]) ** 2, axis=1))
    return centroids


def _assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    cent_sq = np.einsum("cd,cd->c", centroids, centroids)
    labels = np.empty(len(x), dtype=np.int64)
    for lo in range(0, len(x), chunk):
        block = x[lo : lo + chunk]
        d2 = cent_sq[None, :] - 2.0 * (block @ centroids.T)
        labels[lo : lo + chunk] = np.argmin(d2, axis=1)
    return labels


def ivf_build(
    store: Datastore, n_centroids: int, seed: int = 0, n_iter: int = 25
) -> IvfIndex:
    """k-means coarse quantizer (k-means++ init, fixed Lloyd budget) plus
    posting lists partitioning all key indices."""
    if n_centroids > store.n:
        raise ValueError(f"n_centroids={n_centroids} exceeds store size {store.n}")
    if n_centroids < 1:
        raise ValueError("n_centroids must be >= 1")
    x, _ = store.keys_f64()
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, n_centroids, rng)
    for _ in range(n_iter):
        labels = _assign(x, centroids)
        dist_to_centroid = np.sum((x - centroids[labels]) ** 2, axis=1)
        for c in range(n_centroids):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist_to_centroid))
                centroids[c] = x[far]
                dist_to_centroid[far] = 0.0
    # Final assignment uses the float32-rounded centroids that will be
    # persisted, so saved and in-memory indexes answer identically.
    centroids32 = centroids.astype(np.float32)
    labels = _assign(x, centroids32.astype(np.float64))
    lists = [np.flatnonzero(labels == c).astype(np.int64) for c in range(n_centroids)]
    return IvfIndex(centroids=centroids32, lists=lists, store_hash=store.content_hash())


def ivf_search(
    index: IvfIndex, store: Datastore, queries: np.ndarray, k: int, nprobe: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batched IVF search scanning the nprobe nearest centroids' lists."""
    if k < 1:
        raise ValueError("k must be >= 1")
    c = index.n_centroids
    if not 1 <= nprobe <= c:
        raise ValueError(f"nprobe must be in [1, {c}], got {nprobe}")
    keys64, sqnorms = store.keys_f64()
    cents = index.centroids.astype(np.float64)
    cent_sq = np.einsum("cd,cd->c", cents, cents)
    out: list[tuple[np.ndarray, np.ndarray]] = []
    for q in np.asarray(queries, dtype=np.float64):
        cd = cent_sq - 2.0 * (cents @ q) + q @ q
        probe_order = np.lexsort((np.arange(c), cd))
        n_probe = nprobe
        cand = np.concatenate([index.lists[p] for p in probe_order[:n_probe]])
        while len(cand) == 0 and n_probe < c:
            # all probed cells were empty; widen until a candidate appears
            n_probe += 1
            cand = np.concatenate([index.lists[p] for p in probe_order[:n_probe]])
        d2 = sqnorms[cand] - 2.0 * (keys64[cand] @ q) + q @ q
        np.maximum(d2, 0.0, out=d2)
        out.append(_topk_tied(d2, cand, k))
    return out


def ivf_knn(
    index: IvfIndex, store: Datastore, query: np.ndarray, k: int, nprobe: int
) -> NeighborSet:
    """Approximate kNN over the probed cells; equals exact_knn at nprobe=C."""
    idx, dist = ivf_search(index, store, np.asarray(query)[None, :], k, nprobe)[0]
    return NeighborSet(indices=idx, distances=dist, values=store.values[idx])


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_DS_HEADER = struct.Struct("<4sIIQ32s")  # magic, version, d, N, checkpoint hash


def save_datastore(store: Datastore, path) -> None:
    with open(path, "wb") as f:
        f.write(store.to_bytes())


def load_datastore(path, mmap: bool = False) -> Datastore:
    """Load a KNDS file; with mmap=True the key matrix stays on disk."""
    with open(path, "rb") as f:
        head = f.read(_DS_HEADER.size)
        if len(head) != _DS_HEADER.size:
            raise FormatError(f"{path}: truncated datastore header")
        magic, version, d, n, ckpt_hash = _DS_HEADER.unpack(head)
        if magic != DATASTORE_MAGIC:
            raise FormatError(f"{path}: bad datastore magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported datastore version {version}")
        keys_bytes = 4 * n * d
        if not mmap:
            keys_raw = f.read(keys_bytes)
            if len(keys_raw) != keys_bytes:
                raise FormatError(f"{path}: truncated key matrix")
            keys = np.frombuffer(keys_raw, dtype="<f4").reshape(n, d).copy()
        else:
            f.seek(keys_bytes, io.SEEK_CUR)
        vals_raw = f.read(4 * n)
        if len(vals_raw) != 4 * n:
            raise FormatError(f"{path}: truncated value array")
        if f.read(1) != b"":
            raise FormatError(f"{path}: trailing bytes")
        values = np.frombuffer(vals_raw, dtype="<u4").astype(np.int64)
    if mmap:
        keys = np.memmap(path, dtype="<f4", mode="r", offset=_DS_HEADER.size, shape=(n, d))
    return Datastore(keys=keys, values=values, checkpoint_hash=ckpt_hash.hex())


_IVF_HEADER = struct.Struct("<4sIIIQ32s")  # magic, version, d, C, N, store hash


def save_ivf(index: IvfIndex, store_n: int, path) -> None:
    c, d = index.centroids.shape
    with open(path, "wb") as f:
        f.write(_IVF_HEADER.pack(
            IVF_MAGIC, FORMAT_VERSION, d, c, store_n, bytes.fromhex(index.store_hash)
        ))
        f.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        for lst in index.lists:
            f.write(struct.pack("<Q", len(lst)))
            f.write(lst.astype("<u8").tobytes())


def load_ivf(path) -> tuple[IvfIndex, int]:
    with open(path, "rb") as f:
        head = f.read(_IVF_HEADER.size)
        if len(head) != _IVF_HEADER.size:
            raise FormatError(f"{path}: truncated index header")
        magic, version, d, c, n, store_hash = _IVF_HEADER.unpack(head)
        if magic != IVF_MAGIC:
            raise FormatError(f"{path}: bad index magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        cents_raw = f.read(4 * c * d)
        if len(cents_raw) != 4 * c * d:
            raise FormatError(f"{path}: truncated centroids")
        centroids = np.frombuffer(cents_raw, dtype="<f4").reshape(c, d).copy()
        lists = []
        for _ in range(c):
            raw = f.read(8)
            if len(raw) != 8:
                raise FormatError(f"{path}: truncated posting list header")
            (length,) = struct.unpack("<Q", raw)
            body = f.read(8 * length)
            if len(body) != 8 * length:
                raise FormatError(f"{path}: truncated posting list")
            lists.append(np.frombuffer(body, dtype="<u8").astype(np.int64))
        if f.read(1) != b"":
            raise FormatError(f"{path}: trailing bytes")
    merged = np.sort(np.concatenate(lists)) if lists else np.empty(0, dtype=np.int64)
    if len(merged) != n or (len(merged) and not np.array_equal(merged, np.arange(n))):
        raise FormatError(f"{path}: posting lists do not partition 0..{n - 1}")
    return IvfIndex(centroids=centroids, lists=lists, store_hash=store_hash.hex()), n
