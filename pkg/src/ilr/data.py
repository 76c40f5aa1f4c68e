"""Byte-level corpus handling: tokenization, splits, and LM batches."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

BYTE_VOCAB = 257  # 256 byte values + one pad id
PAD_ID = 256
CACHE_MAGIC = b"ILRTOKS1"


def tokenize_bytes(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids: Sequence[int]) -> bytes:
    return bytes(int(i) for i in ids if int(i) != PAD_ID)


def read_corpus(paths: Sequence[str | Path]) -> np.ndarray:
    """Concatenate the bytes of every file; missing files raise ``FileNotFoundError``."""
    chunks = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise FileNotFoundError(f"corpus file not found: {p}")
        chunks.append(p.read_bytes())
    return tokenize_bytes(b"".join(chunks))


def save_token_cache(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 0xFFFF):
        raise ValueError("token ids do not fit in 16 bits")
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<Q", ids.size))
        f.write(ids.astype("<u2").tobytes())


def load_token_cache(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not an ILRTOKS1 token cache")
    (n,) = struct.unpack_from("<Q", raw, 8)
    ids = np.frombuffer(raw, dtype="<u2", count=n, offset=16)
    return ids.astype(np.int64)


@dataclass
class Corpus:
    tokens: np.ndarray
    train_end: int
    sources: tuple[str, ...] = ()

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.train_end]

    @property
    def test(self) -> np.ndarray:
        return self.tokens[self.train_end:]


def split(tokens: np.ndarray, test_fraction: float, seq_len: int, sources: Sequence[str] = ()) -> Corpus:
    """Hold out the contiguous tail ``floor(N * test_fraction)`` tokens as test."""
    if not 0 < test_fraction < 0.5:
        raise ValueError(f"test_fraction must be in (0, 0.5), got {test_fraction}")
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens)
    if n < 2 * (seq_len + 1):
        raise ValueError(f"corpus of {n} tokens is shorter than 2*(T+1) = {2 * (seq_len + 1)}")
    n_test = int(np.floor(n * test_fraction))
    return Corpus(tokens=tokens, train_end=n - n_test, sources=tuple(map(str, sources)))


def windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping ``[n, T+1]`` windows; the trailing partial window is dropped."""
    w = seq_len + 1
    n = len(tokens) // w
    return np.asarray(tokens[: n * w], dtype=np.int64).reshape(n, w)


@dataclass
class Batch:
    inputs: np.ndarray   # [B, T]
    targets: np.ndarray  # [B, T]


def batches(tokens: np.ndarray, batch_size: int, seq_len: int, seed: int,
            epoch: int = 0) -> Iterator[Batch]:
    """One epoch of shuffled full batches; leftover windows are dropped."""
    win = windows(tokens, seq_len)
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(len(win))
    for i in range(0, len(order) - batch_size + 1, batch_size):
        w = win[order[i:i + batch_size]]
        yield Batch(inputs=w[:, :-1], targets=w[:, 1:])


def batch_stream(tokens: np.ndarray, batch_size: int, seq_len: int, seed: int) -> Iterator[Batch]:
    """Endless stream of batches, reshuffling every epoch."""
    if len(windows(tokens, seq_len)) < batch_size:
        raise ValueError(
            f"split holds {len(windows(tokens, seq_len))} windows of length {seq_len + 1}, "
            f"fewer than batch size {batch_size}"
        )
    epoch = 0
    while True:
        yield from batches(tokens, batch_size, seq_len, seed, epoch)
        epoch += 1


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler text for smoke tests and demos.

    Sentences are drawn from a small Markov grammar over a fixed word list,
    so there is real structure for a byte-level model to pick up.
    """
    rng = np.random.default_rng(seed)
    subjects = ["the model", "a layer", "the network", "each token", "the gradient", "our method",
                "the optimizer", "a small transformer", "the attention head", "every block"]
    verbs = ["refines", "updates", "predicts", "reuses", "computes", "mixes", "reads", "writes",
             "scales", "normalizes"]
    objects = ["the hidden state", "its own output", "the next byte", "a residual stream",
               "the embedding", "the loss", "position information", "the key vectors",
               "a longer context", "the final logits"]
    tails = ["", " again", " once more", " at every step", " in place", " with shared weights",
             " before the head", " after warmup"]
    out = []
    size = 0
    while size < n_bytes:
        s = f"{rng.choice(subjects)} {rng.choice(verbs)} {rng.choice(objects)}{rng.choice(tails)}."
        s = s[0].upper() + s[1:]
        s += "\n" if rng.random() < 0.2 else " "
        out.append(s)
        size += len(s)
    return "".join(out).encode("ascii")[:n_bytes]


def stdlib_text(min_bytes: int = 1_200_000) -> bytes:
    """Real text that ships with every CPython install.

    Starts with the interpreter's bundled help topics (English prose), then
    appends standard-library sources in sorted order until ``min_bytes``.
    The result is fixed for a given Python installation.
    """
    import sysconfig

    import pydoc_data.topics

    chunks = [Path(pydoc_data.topics.__file__).read_bytes()]
    size = len(chunks[0])
    stdlib = Path(sysconfig.get_paths()["stdlib"])
    for p in sorted(stdlib.glob("*.py")):
        if size >= min_bytes:
            break
        b = p.read_bytes()
        chunks.append(b)
        size += len(b)
    if size < min_bytes:
        raise RuntimeError(f"standard library provides only {size} bytes of text")
    return b"".join(chunks)[:min_bytes]
