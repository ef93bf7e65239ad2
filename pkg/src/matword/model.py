"""Word-matrix tables and the sum / product / hybrid sentence encoders.

Each word is a square d x d matrix. A sentence is encoded by aggregating its
word matrices (elementwise sum for the order-agnostic CBOW variant, matrix
product in sentence order for the order-aware CMOW variant) and flattening
the result column-major. The hybrid encoder concatenates a sum embedding
from one table with a product embedding from a second table.

Padding uses the aggregation's neutral element: the zero matrix under sum,
the identity under product. The padding id is the table's row count (one past
the vocabulary) and owns no parameters.
"""

from __future__ import annotations

import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

MODES = ("sum", "product", "hybrid")
INIT_STRATEGIES = ("identity", "glorot", "normal")

MAGIC = b"CMSM"
FORMAT_VERSION = 1
_MODE_CODES = {"sum": 0, "product": 1, "hybrid": 2}
_CODE_MODES = {v: k for k, v in _MODE_CODES.items()}


class ModelFormatError(ValueError):
    """Raised when a model file has a bad magic, version, or structure."""


@dataclass(frozen=True)
class EncoderSpec:
    """Aggregation mode plus matrix side lengths (d2 is hybrid-only)."""

    mode: str
    d1: int
    d2: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode: {self.mode!r}")
        if self.d1 < 1:
            raise ValueError("d1 must be >= 1")
        if self.mode == "hybrid" and self.d2 < 1:
            raise ValueError("hybrid mode requires d2 >= 1")
        if self.mode != "hybrid" and self.d2 != 0:
            raise ValueError("d2 is only meaningful in hybrid mode")

    @property
    def dim(self) -> int:
        """Length of the flattened sentence embedding."""
        d = self.d1 * self.d1
        if self.mode == "hybrid":
            d += self.d2 * self.d2
        return d


def init_table(
    m: int,
    d: int,
    strategy: str = "identity",
    sigma: float = 0.1,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> np.ndarray:
    """Create an (m, d, d) table of per-word matrices.

    "identity" draws N(0, sigma^2) entries and adds the identity, which keeps
    the expected product of any number of word matrices at the identity, so
    embedding magnitudes do not collapse with sentence length. "normal" is
    the plain N(0, sigma^2) baseline. "glorot" is the uniform fan-based
    baseline, with the fan measured on the flattened d*d embedding width;
    a per-matrix fan of (d, d) would keep product variance constant and never
    exhibit the vanishing the small-variance baselines are meant to show.
    """
    if m < 1 or d < 1:
        raise ValueError("m and d must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng() if rng is None else rng
    if strategy == "identity":
        table = rng.normal(0.0, sigma, (m, d, d)) + np.eye(d)
    elif strategy == "normal":
        table = rng.normal(0.0, sigma, (m, d, d))
    elif strategy == "glorot":
        bound = np.sqrt(6.0 / (2.0 * d * d))
        table = rng.uniform(-bound, bound, (m, d, d))
    else:
        raise ValueError(f"unknown init strategy: {strategy!r}")
    return table.astype(dtype)


def flatten(matrix: np.ndarray) -> np.ndarray:
    """Concatenate the columns of a matrix into a vector (column-major)."""
    return np.asarray(matrix).ravel(order="F")


def unflatten(vec: np.ndarray, d: int) -> np.ndarray:
    """Inverse of `flatten` for a d x d matrix."""
    return np.asarray(vec).reshape((d, d), order="F")


def split_tables(tables, spec: EncoderSpec) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalize the table argument: a single array, or (t1, t2) for hybrid."""
    if spec.mode == "hybrid":
        t1, t2 = tables
        if t1.shape[1] != spec.d1 or t2.shape[1] != spec.d2:
            raise ValueError("table shapes do not match spec dimensions")
        if t1.shape[0] != t2.shape[0]:
            raise ValueError("hybrid tables must share the vocabulary size")
        return t1, t2
    table = tables[0] if isinstance(tables, (tuple, list)) else tables
    if table.shape[1] != spec.d1:
        raise ValueError("table shape does not match spec dimensions")
    return table, None


def _valid_matrices(table: np.ndarray, ids, pad_mask) -> np.ndarray:
    """Gather the non-padding word matrices for `ids`, in order."""
    ids = np.asarray(ids, dtype=np.int64)
    m = table.shape[0]
    pad = (ids == m) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    real = ids[~pad]
    if real.size and (real.min() < 0 or real.max() >= m):
        raise ValueError("id out of range")
    return table[real]


def _aggregate(table: np.ndarray, ids, pad_mask, mode: str) -> np.ndarray:
    d = table.shape[1]
    mats = _valid_matrices(table, ids, pad_mask)
    if mode == "sum":
        agg = mats.sum(axis=0) if len(mats) else np.zeros((d, d), dtype=table.dtype)
    else:
        if len(mats) == 0:
            agg = np.eye(d, dtype=table.dtype)
        else:
            agg = mats[0].copy()
            for i in range(1, len(mats)):
                agg = agg @ mats[i]
    return flatten(agg)


def encode(tables, spec: EncoderSpec, ids, pad_mask=None) -> np.ndarray:
    """Encode a token-id sequence into a flat sentence embedding.

    Padding slots (sentinel id, or True in `pad_mask`) contribute the
    neutral element. Ids beyond the padding sentinel raise ValueError.
    """
    t1, t2 = split_tables(tables, spec)
    if spec.mode == "hybrid":
        return np.concatenate([
            _aggregate(t1, ids, pad_mask, "sum"),
            _aggregate(t2, ids, pad_mask, "product"),
        ])
    return _aggregate(t1, ids, pad_mask, spec.mode)


def encode_parallel(table: np.ndarray, ids, pad_mask=None) -> np.ndarray:
    """Product encoding via balanced pairwise tree reduction.

    Associativity makes this mathematically equal to the sequential product
    while needing only ~log2(n) batched multiplication rounds.
    """
    d = table.shape[1]
    mats = _valid_matrices(table, ids, pad_mask)
    if len(mats) == 0:
        return flatten(np.eye(d, dtype=table.dtype))
    while mats.shape[0] > 1:
        half = mats.shape[0] // 2
        paired = mats[0:2 * half:2] @ mats[1:2 * half:2]
        if mats.shape[0] % 2:
            paired = np.concatenate([paired, mats[-1:]])
        mats = paired
    return flatten(mats[0])


@dataclass
class Model:
    """A trained (or freshly initialized) encoder: spec, vocab, and tables."""

    spec: EncoderSpec
    tokens: list[str]
    input1: np.ndarray
    input2: np.ndarray | None = None
    output: np.ndarray | None = None
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        if self.spec.mode == "hybrid" and self.input2 is None:
            raise ValueError("hybrid model requires a second input table")

    @property
    def m(self) -> int:
        return len(self.tokens)

    @property
    def tables(self):
        if self.spec.mode == "hybrid":
            return (self.input1, self.input2)
        return self.input1

    def encode_ids(self, ids, pad_mask=None) -> np.ndarray:
        return encode(self.tables, self.spec, ids, pad_mask)

    def encode_tokens(self, tokens: list[str]) -> tuple[np.ndarray, int]:
        """Encode a token list, skipping OOV tokens; returns (embedding, n_used)."""
        ids = np.array([self.token_to_id[t] for t in tokens if t in self.token_to_id],
                       dtype=np.int64)
        return self.encode_ids(ids), ids.size


def write_model(path, model: Model) -> None:
    """Serialize a model in the little-endian binary container format."""
    spec = model.spec
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IBII Q".replace(" ", ""),
                             FORMAT_VERSION, _MODE_CODES[spec.mode],
                             spec.d1, spec.d2, model.m))
        for tok in model.tokens:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(model.input1, dtype="<f4").tobytes())
        if spec.mode == "hybrid":
            fh.write(np.ascontiguousarray(model.input2, dtype="<f4").tobytes())
        if model.output is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(np.ascontiguousarray(model.output, dtype="<f4").tobytes())


def read_model(path) -> Model:
    """Read a model file, rejecting bad magic, version, or truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ModelFormatError("bad magic")
    try:
        version, mode_code, d1, d2, m = struct.unpack_from("<IBIIQ", data, 4)
        offset = 4 + struct.calcsize("<IBIIQ")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format version {version}")
        if mode_code not in _CODE_MODES:
            raise ModelFormatError(f"unknown mode code {mode_code}")
        mode = _CODE_MODES[mode_code]
        tokens = []
        for _ in range(m):
            (ln,) = struct.unpack_from("<I", data, offset)
            offset += 4
            tokens.append(data[offset:offset + ln].decode("utf-8"))
            offset += ln
        spec = EncoderSpec(mode, d1, d2)

        def take_f32(count):
            nonlocal offset
            end = offset + 4 * count
            if end > len(data):
                raise ModelFormatError("truncated model file")
            arr = np.frombuffer(data[offset:end], dtype="<f4").copy()
            offset = end
            return arr

        input1 = take_f32(m * d1 * d1).reshape(m, d1, d1)
        input2 = take_f32(m * d2 * d2).reshape(m, d2, d2) if mode == "hybrid" else None
        if offset >= len(data):
            raise ModelFormatError("truncated model file")
        (flag,) = struct.unpack_from("<B", data, offset)
        offset += 1
        output = take_f32(m * spec.dim).reshape(m, spec.dim) if flag else None
    except (struct.error, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"truncated or corrupt model file: {exc}") from exc
    return Model(spec, tokens, input1, input2, output)


def _encode_all(fn, sentences, threads: int):
    if threads <= 1:
        for s in sentences:
            fn(s)
        return
    chunks = [sentences[i::threads] for i in range(threads)]

    def work(chunk):
        for s in chunk:
            fn(s)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, chunks))


def throughput_bench(tables, spec: EncoderSpec, sentences, threads: int = 1) -> dict:
    """Measure encoding throughput for the three aggregation paths.

    Returns a JSON-serializable report with sentences/second for the sum
    encoder, the sequential product encoder, and the tree-parallel product
    encoder. Absolute numbers are hardware-bound; the report records them
    without judging.
    """
    t1, t2 = split_tables(tables, spec)
    t_sum = t1
    t_prod = t2 if spec.mode == "hybrid" else t1
    sum_spec = EncoderSpec("sum", t_sum.shape[1])

    variants = {
        "sum": lambda s: encode(t_sum, sum_spec, s),
        "product_sequential": lambda s: _aggregate(t_prod, s, None, "product"),
        "product_parallel": lambda s: encode_parallel(t_prod, s),
    }
    report = {
        "threads": int(threads),
        "n_sentences": len(sentences),
        "d_sum": int(t_sum.shape[1]),
        "d_product": int(t_prod.shape[1]),
        "modes": {},
    }
    for name, fn in variants.items():
        start = time.perf_counter()
        _encode_all(fn, sentences, threads)
        elapsed = time.perf_counter() - start
        report["modes"][name] = {
            "seconds": elapsed,
            "sentences_per_second": len(sentences) / elapsed if elapsed > 0 else float("inf"),
        }
    return report
