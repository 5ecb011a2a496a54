"""Word-level corpus handling: vocabulary, encoding, and LM batching.

Tokenization is whitespace splitting (WikiText convention). Ids are dense:
id 0 is reserved for ``<unk>`` and ids 1..V-1 are sorted by descending
training-corpus frequency (ties broken lexicographically), so "most frequent
words" analyses are plain id-prefix slices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .hashing import sha256_hex

UNK_TOKEN = "<unk>"
UNK_ID = 0


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int]
    freq: np.ndarray  # int64, freq[0] = count of tokens that mapped to <unk>

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def token_to_id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def id_to_token(self, idx: int) -> str:
        return self.itos[idx]

    def to_bytes(self) -> bytes:
        """Serialized form: one ``token<TAB>count`` line per id, line 0 is <unk>."""
        lines = [f"{tok}\t{int(self.freq[i])}" for i, tok in enumerate(self.itos)]
        return ("\n".join(lines) + "\n").encode("utf-8")

    def content_hash(self) -> str:
        return sha256_hex(self.to_bytes())

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocab":
        itos: list[str] = []
        freq: list[int] = []
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, count = line.split("\t")
                itos.append(tok)
                freq.append(int(count))
        if not itos or itos[0] != UNK_TOKEN:
            raise ValueError(f"vocab file {path} does not start with {UNK_TOKEN}")
        stoi = {tok: i for i, tok in enumerate(itos)}
        return cls(itos=itos, stoi=stoi, freq=np.asarray(freq, dtype=np.int64))


@dataclass
class EncodedSplit:
    name: str
    ids: np.ndarray  # int64
    n_source_tokens: int
    vocab_hash: str = field(default="")

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(raw_text: str, min_count: int = 1) -> Vocab:
    """Build a frequency-sorted vocabulary from whitespace-tokenized text.

    Tokens occurring fewer than ``min_count`` times (and the literal
    ``<unk>`` string) map to id 0; their occurrences are accounted in
    ``freq[0]`` so the freq array always sums to the corpus token count.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    tokens = raw_text.split()
    if not tokens:
        raise ValueError("empty corpus")
    counts: dict[str, int] = {}
    for tok in tokens:
        counts[tok] = counts.get(tok, 0) + 1
    kept = [
        (tok, c)
        for tok, c in counts.items()
        if c >= min_count and tok != UNK_TOKEN
    ]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    itos = [UNK_TOKEN] + [tok for tok, _ in kept]
    freq = np.zeros(len(itos), dtype=np.int64)
    for i, (_, c) in enumerate(kept, start=1):
        freq[i] = c
    freq[UNK_ID] = len(tokens) - int(freq[1:].sum())
    stoi = {tok: i for i, tok in enumerate(itos)}
    return Vocab(itos=itos, stoi=stoi, freq=freq)


def encode(vocab: Vocab, raw_text: str, name: str = "train") -> EncodedSplit:
    """Encode text to ids; out-of-vocabulary tokens become <unk>."""
    tokens = raw_text.split()
    ids = np.fromiter(
        (vocab.stoi.get(tok, UNK_ID) for tok in tokens),
        dtype=np.int64,
        count=len(tokens),
    )
    return EncodedSplit(
        name=name,
        ids=ids,
        n_source_tokens=len(tokens),
        vocab_hash=vocab.content_hash(),
    )


def decode(vocab: Vocab, ids) -> str:
    return " ".join(vocab.itos[int(i)] for i in ids)


def batch_iter(
    split: EncodedSplit, batch_size: int, bptt: int
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (input, target) id blocks of shape (batch_size, bptt).

    The id stream is cut into ``batch_size`` contiguous lanes of
    ``len(ids) // batch_size`` tokens; lane remainders and the stream tail
    are dropped. Targets are inputs shifted one position within the lane, so
    no target index is ever emitted twice and iteration is deterministic.
    """
    ids = split.ids
    if len(ids) < batch_size * (bptt + 1):
        raise ValueError(
            f"split of {len(ids)} ids too short for batch_size={batch_size}, "
            f"bptt={bptt} (needs at least {batch_size * (bptt + 1)})"
        )
    lane_len = len(ids) // batch_size
    lanes = ids[: batch_size * lane_len].reshape(batch_size, lane_len)
    n_batches = (lane_len - 1) // bptt
    for b in range(n_batches):
        lo = b * bptt
        x = lanes[:, lo : lo + bptt]
        y = lanes[:, lo + 1 : lo + bptt + 1]
        yield x, y


def num_batches(split_len: int, batch_size: int, bptt: int) -> int:
    """Number of blocks batch_iter will yield for a split of this length."""
    lane_len = split_len // batch_size
    return max(0, (lane_len - 1) // bptt)


def load_text(path) -> str:
    with open(path, "r", encoding="utf-8") as f:
        return f.read()
