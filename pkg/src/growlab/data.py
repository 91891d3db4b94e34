"""Deterministic token-batch pipeline.

The batch schedule is a pure function of (corpus, split, step, seed): window
starts come from a counter-based Philox generator keyed by hashing those
arguments, so every training run — and every candidate inside a race — sees
exactly the same data at the same step without any shared state. The last
10% of a corpus is reserved as the validation region; train and validation
windows can never overlap by construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, StorageError

VALIDATION_FRACTION = 0.1
COPY_TASK_PAYLOAD = 7  # tokens per half-record, delimiter excluded

SYNTHETIC_KINDS = ("markov-bigram", "copy-task")


@dataclass
class Corpus:
    tokens: np.ndarray  # 1-d int32
    vocab_size: int
    provenance: str

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        if self.tokens.size == 0:
            raise DataError("corpus is empty")
        if self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size:
            raise DataError(
                f"corpus token ids must lie in [0, {self.vocab_size})"
            )


@dataclass(frozen=True)
class TokenBatch:
    tokens: np.ndarray  # (batch, seq) int32
    digest: int  # 64-bit content digest

    @property
    def shape(self):
        return self.tokens.shape


def token_digest(tokens: np.ndarray) -> int:
    """64-bit content digest of a token matrix (shape-sensitive, dtype-canonical)."""
    arr = np.ascontiguousarray(tokens, dtype=np.int32)
    h = hashlib.blake2b(digest_size=8)
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return int.from_bytes(h.digest(), "little")


def _derive_key(*parts) -> np.ndarray:
    """Two uint64 words hashed from the given parts; keys a Philox stream."""
    h = hashlib.blake2b(digest_size=16)
    for part in parts:
        h.update(str(part).encode())
        h.update(b"\x1f")
    return np.frombuffer(h.digest(), dtype=np.uint64)


def _keyed_generator(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_derive_key(*parts)))


def markov_bigram_transition(seed: int, vocab_size: int = 32,
                             out_degree: int = 4) -> np.ndarray:
    """Row-stochastic transition matrix of a sparse random bigram chain."""
    if vocab_size < 2:
        raise ConfigError(f"vocab_size must be >= 2, got {vocab_size}")
    gen = _keyed_generator("bigram-chain", seed, vocab_size, out_degree)
    deg = min(out_degree, vocab_size)
    trans = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    for s in range(vocab_size):
        targets = gen.choice(vocab_size, size=deg, replace=False)
        weights = gen.random(deg) + 0.1
        trans[s, targets] = weights / weights.sum()
    return trans


def bigram_entropy_rate(transition: np.ndarray) -> float:
    """Entropy rate (nats/token) of a stationary Markov chain.

    The stationary distribution comes from power iteration; rows with zero
    stationary mass contribute nothing.
    """
    n = transition.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(10_000):
        nxt = pi @ transition
        if np.abs(nxt - pi).max() < 1e-13:
            pi = nxt
            break
        pi = nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(transition > 0, np.log(transition), 0.0)
    return float(-(pi[:, None] * transition * logp).sum())


def make_synthetic_corpus(kind: str, size: int, seed: int,
                          vocab_size: int = 32) -> Corpus:
    """Generate a synthetic corpus; deterministic in (kind, size, seed, vocab)."""
    if size < 1:
        raise ConfigError(f"corpus size must be >= 1, got {size}")
    if kind == "markov-bigram":
        trans = markov_bigram_transition(seed, vocab_size)
        cumulative = np.cumsum(trans, axis=1)
        gen = _keyed_generator("bigram-walk", seed, size, vocab_size)
        uniform = gen.random(size)
        tokens = np.empty(size, dtype=np.int32)
        state = 0
        for i in range(size):
            state = int(np.searchsorted(cumulative[state], uniform[i], side="right"))
            state = min(state, vocab_size - 1)
            tokens[i] = state
        return Corpus(tokens, vocab_size, f"synthetic:markov-bigram:seed={seed}")
    if kind == "copy-task":
        # Records [0, p1..pm, 0, p1..pm]: the second half repeats the first.
        gen = _keyed_generator("copy-task", seed, size, vocab_size)
        m = COPY_TASK_PAYLOAD
        record_len = 2 * (m + 1)
        n_records = size // record_len + 1
        payloads = gen.integers(1, vocab_size, size=(n_records, m), dtype=np.int32)
        records = np.zeros((n_records, record_len), dtype=np.int32)
        records[:, 1:m + 1] = payloads
        records[:, m + 2:] = payloads
        return Corpus(records.reshape(-1)[:size], vocab_size,
                      f"synthetic:copy-task:seed={seed}")
    raise ConfigError(
        f"unknown synthetic corpus kind {kind!r}; expected one of {SYNTHETIC_KINDS}"
    )


def copy_task_record_length() -> int:
    return 2 * (COPY_TASK_PAYLOAD + 1)


def load_text_corpus(path, vocab_mode: str = "byte") -> Corpus:
    """Byte-level tokenization of a raw file; vocab is 256 byte values + 1 pad id."""
    if vocab_mode != "byte":
        raise ConfigError(f"vocab_mode must be 'byte', got {vocab_mode!r}")
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise StorageError(f"cannot read corpus file {path}: {exc}") from exc
    if not raw:
        raise DataError(f"corpus file {path} is empty")
    tokens = np.frombuffer(raw, dtype=np.uint8).astype(np.int32)
    return Corpus(tokens, 257, f"text-file:{path}")


def detokenize_bytes(corpus: Corpus) -> bytes:
    """Inverse of byte-level tokenization (pad id 256 must not appear)."""
    if corpus.tokens.max() > 255:
        raise DataError("corpus contains non-byte token ids")
    return corpus.tokens.astype(np.uint8).tobytes()


def split_regions(corpus: Corpus) -> dict[str, tuple[int, int]]:
    """Half-open [start, stop) index ranges of the train and validation regions."""
    n = corpus.tokens.size
    cut = n - int(np.floor(n * VALIDATION_FRACTION))
    return {"train": (0, cut), "validation": (cut, n)}


def batch_at(corpus: Corpus, split: str, step: int, seed: int,
             batch_size: int, seq_len: int) -> TokenBatch:
    """The batch served at a given global step: a pure function of its arguments."""
    regions = split_regions(corpus)
    if split not in regions:
        raise ConfigError(f"split must be 'train' or 'validation', got {split!r}")
    if batch_size < 1 or seq_len < 2:
        raise ConfigError("batch_size must be >= 1 and seq_len >= 2")
    start, stop = regions[split]
    region_len = stop - start
    if seq_len >= region_len:
        raise DataError(
            f"seq_len {seq_len} does not fit inside the {split} region "
            f"({region_len} tokens); shrink seq_len or grow the corpus"
        )
    gen = _keyed_generator("batch", seed, split, step)
    starts = start + gen.integers(0, region_len - seq_len + 1, size=batch_size)
    rows = np.stack([corpus.tokens[s:s + seq_len] for s in starts])
    return TokenBatch(tokens=rows, digest=token_digest(rows))


def batch_window_starts(corpus: Corpus, split: str, step: int, seed: int,
                        batch_size: int, seq_len: int) -> np.ndarray:
    """Window start indices batch_at would sample (exposed for disjointness audits)."""
    regions = split_regions(corpus)
    start, stop = regions[split]
    region_len = stop - start
    gen = _keyed_generator("batch", seed, split, step)
    return start + gen.integers(0, region_len - seq_len + 1, size=batch_size)


def validation_set(corpus: Corpus, seed: int, n_batches: int,
                   batch_size: int, seq_len: int) -> list[TokenBatch]:
    """Fixed evaluation batches, independent of the training step."""
    if n_batches < 1:
        raise ConfigError(f"n_batches must be >= 1, got {n_batches}")
    return [
        batch_at(corpus, "validation", i, seed, batch_size, seq_len)
        for i in range(n_batches)
    ]
