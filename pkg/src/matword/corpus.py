"""Corpus handling: tokenization, vocabulary, noise distribution, and batching.

The corpus format is UTF-8 plain text, one sentence per line. Everything in
this module is deterministic given an RNG, so batch streams can be replayed
exactly by reseeding.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

# Characters stripped from token edges only; interior punctuation survives.
_EDGE_PUNCT = ".,;:!?\"'()[]"

DEFAULT_VOCAB_SIZE = 30_000
NOISE_POWER = 0.75


def tokenize(line: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    out = []
    for tok in line.lower().split():
        tok = tok.strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out


@dataclass
class Vocabulary:
    """Token table with dense ids assigned in descending frequency order.

    Ties in frequency are broken by first appearance in the corpus. The id
    ``size`` (one past the last word) is reserved as the padding sentinel;
    it owns no parameters anywhere downstream.
    """

    tokens: list[str]
    counts: np.ndarray
    token_to_id: dict[str, int] = field(repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.tokens) != len(self.counts):
            raise ValueError("tokens and counts length mismatch")
        if len(self.tokens) and self.counts.min() <= 0:
            raise ValueError("every count must be positive")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_counts(cls, counts: Counter, max_size: int = DEFAULT_VOCAB_SIZE) -> "Vocabulary":
        """Build from token counts. Iteration order of `counts` breaks ties."""
        if max_size < 1:
            raise ValueError("max_size must be >= 1")
        # sorted() is stable, so equal counts keep their first-seen order.
        ranked = counts.most_common(max_size)
        tokens = [t for t, _ in ranked]
        freq = np.array([n for _, n in ranked], dtype=np.int64)
        return cls(tokens, freq, {t: i for i, t in enumerate(tokens)})

    def ids(self, tokens: list[str]) -> np.ndarray:
        """Map tokens to ids, silently discarding out-of-vocabulary tokens."""
        t2i = self.token_to_id
        return np.array([t2i[t] for t in tokens if t in t2i], dtype=np.int64)

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, n in zip(self.tokens, self.counts):
                fh.write(f"{tok}\t{int(n)}\n")

    @classmethod
    def load_tsv(cls, path) -> "Vocabulary":
        tokens, freq = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, n = line.split("\t")
                tokens.append(tok)
                freq.append(int(n))
        return cls(tokens, np.array(freq, dtype=np.int64), {t: i for i, t in enumerate(tokens)})


def build_vocabulary(corpus_path, max_size: int = DEFAULT_VOCAB_SIZE) -> Vocabulary:
    """Count tokens in a one-sentence-per-line file and keep the most frequent."""
    counts: Counter = Counter()
    with open(corpus_path, encoding="utf-8") as fh:
        for line in fh:
            counts.update(tokenize(line))
    if not counts:
        raise ValueError("empty corpus")
    return Vocabulary.from_counts(counts, max_size)


@dataclass
class NoiseDistribution:
    """Unigram noise distribution with counts raised to the 3/4 power.

    Stored as a cumulative weight array so sampling is a single inverse-CDF
    lookup (binary search) per draw.
    """

    cumulative_weights: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.cumulative_weights, dtype=np.float64)
        if cw.ndim != 1 or cw.size == 0:
            raise ValueError("cumulative_weights must be a non-empty 1-d array")
        if abs(cw[-1] - 1.0) > 1e-9:
            raise ValueError("cumulative weights must end at 1")
        self.cumulative_weights = cw

    @classmethod
    def from_counts(cls, counts) -> "NoiseDistribution":
        weights = np.asarray(counts, dtype=np.float64) ** NOISE_POWER
        cum = np.cumsum(weights)
        cum /= cum[-1]
        cum[-1] = 1.0
        return cls(cum)

    def probabilities(self) -> np.ndarray:
        return np.diff(self.cumulative_weights, prepend=0.0)

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if k < 1:
            raise ValueError("k must be >= 1")
        u = rng.random(k)
        return np.searchsorted(self.cumulative_weights, u, side="right").astype(np.int64)


def sample_noise(dist: NoiseDistribution, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw k noise word ids i.i.d. from the unigram^(3/4) distribution."""
    return dist.sample(k, rng)


@dataclass
class TrainingSample:
    """One prediction task: a 2c-token context window and a target word.

    Padding slots hold the sentinel id (vocabulary size) and are flagged in
    ``pad_mask``; the target is never a padding slot.
    """

    context_ids: np.ndarray
    target_id: int
    pad_mask: np.ndarray


@dataclass
class TrainingBatch:
    """Dense arrays for a batch of samples plus k negatives per sample."""

    contexts: np.ndarray   # (B, 2c) int64, includes padding sentinel ids
    targets: np.ndarray    # (B,) int64
    pad_mask: np.ndarray   # (B, 2c) bool, True marks padding
    negatives: np.ndarray  # (B, k) int64

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def samples(self) -> list[TrainingSample]:
        return [
            TrainingSample(self.contexts[i], int(self.targets[i]), self.pad_mask[i])
            for i in range(len(self))
        ]


def load_sentences(corpus_path, vocab: Vocabulary) -> list[np.ndarray]:
    """Read the corpus into per-line id arrays, discarding OOV tokens.

    Every input line yields an entry (possibly empty) so sentence indices are
    stable for the validation split.
    """
    sentences = []
    with open(corpus_path, encoding="utf-8") as fh:
        for line in fh:
            sentences.append(vocab.ids(tokenize(line)))
    return sentences


def validation_split(n_sentences: int, fraction: float = 0.001) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically hold out ~`fraction` of sentence indices by hashing them."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    cut = int(fraction * 2**32)
    hashes = np.array([_index_hash(i) for i in range(n_sentences)], dtype=np.uint64)
    val = hashes < cut
    idx = np.arange(n_sentences)
    return idx[~val], idx[val]


def _index_hash(i: int) -> int:
    digest = hashlib.blake2b(str(i).encode(), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def sentence_windows(
    sentence: np.ndarray,
    c: int,
    samples_per_sentence: int,
    target_mode: str,
    rng: np.random.Generator,
    pad_id: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample center positions and build (contexts, targets, pad_mask) arrays.

    Up to `samples_per_sentence` center positions are drawn without
    replacement. Each window spans 2c+1 slots around its center, padded with
    the sentinel where it overruns the sentence. In "center" mode the target
    is the center word; in "random" mode it is drawn uniformly from the
    window's non-padding slots. The remaining 2c slots form the context in
    sentence order.
    """
    if target_mode not in ("center", "random"):
        raise ValueError(f"unknown target mode: {target_mode!r}")
    n = len(sentence)
    n_take = min(n, samples_per_sentence)
    centers = rng.permutation(n)[:n_take]
    padded = np.full(n + 2 * c, pad_id, dtype=np.int64)
    padded[c:c + n] = sentence

    width = 2 * c
    contexts = np.empty((n_take, width), dtype=np.int64)
    targets = np.empty(n_take, dtype=np.int64)
    for row, t in enumerate(centers):
        window = padded[t:t + width + 1]  # sentence positions t-c .. t+c
        if target_mode == "center":
            j = c
        else:
            real = np.flatnonzero(window != pad_id)
            j = int(real[rng.integers(len(real))])
        targets[row] = window[j]
        contexts[row] = np.delete(window, j)
    return contexts, targets, contexts == pad_id


def batches_from_sentences(
    sentences: list[np.ndarray],
    pad_id: int,
    noise: NoiseDistribution,
    rng: np.random.Generator,
    c: int = 5,
    samples_per_sentence: int = 30,
    sentences_per_batch: int = 1024,
    k: int = 20,
    target_mode: str = "random",
    epochs: int | None = 1,
):
    """Yield TrainingBatch objects; `epochs=None` loops over the data forever.

    Sentences with fewer than two in-vocabulary tokens are skipped. Each
    epoch reshuffles the sentence order with the stream's RNG, so a given
    seed reproduces the exact batch sequence.
    """
    if c < 1:
        raise ValueError("window radius c must be >= 1")
    usable = [s for s in sentences if len(s) >= 2]
    if not usable:
        return
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(usable))
        for start in range(0, len(usable), sentences_per_batch):
            chunk = order[start:start + sentences_per_batch]
            parts = [
                sentence_windows(usable[i], c, samples_per_sentence, target_mode, rng, pad_id)
                for i in chunk
            ]
            contexts = np.concatenate([p[0] for p in parts])
            targets = np.concatenate([p[1] for p in parts])
            mask = np.concatenate([p[2] for p in parts])
            negatives = noise.sample(len(targets) * k, rng).reshape(len(targets), k)
            yield TrainingBatch(contexts, targets, mask, negatives)
        epoch += 1


def make_batches(
    corpus_path,
    vocab: Vocabulary,
    c: int = 5,
    samples_per_sentence: int = 30,
    sentences_per_batch: int = 1024,
    target_mode: str = "random",
    rng: np.random.Generator | None = None,
    noise: NoiseDistribution | None = None,
    k: int = 20,
    epochs: int | None = 1,
    indices: np.ndarray | None = None,
):
    """Stream training batches straight from a corpus file.

    `indices` restricts batching to a subset of sentence indices (used to
    exclude the validation split).
    """
    rng = np.random.default_rng() if rng is None else rng
    noise = NoiseDistribution.from_counts(vocab.counts) if noise is None else noise
    sentences = load_sentences(corpus_path, vocab)
    if indices is not None:
        sentences = [sentences[i] for i in indices]
    yield from batches_from_sentences(
        sentences,
        vocab.pad_id,
        noise,
        rng,
        c=c,
        samples_per_sentence=samples_per_sentence,
        sentences_per_batch=sentences_per_batch,
        k=k,
        target_mode=target_mode,
        epochs=epochs,
    )
