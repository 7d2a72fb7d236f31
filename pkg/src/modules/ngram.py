"""
N-gram repetition statistics over pre-tokenized corpora.

Within each window of ``window`` tokens, repetitions of n-grams are counted as
occurrences beyond the first (overlapping occurrences included):

    repetitions = (window - n + 1) - distinct n-grams

N-grams are bucketed by a 64-bit polynomial hash; equal-hash neighbours are
verified token by token and a window with a genuine collision is recounted
exactly.
"""
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from src.utils.errors import FormatError, ParameterError
from src.utils.logging_utils import get_logger
from src.utils.settings import get_settings

logger = get_logger(__name__)

FORMAT_BINARY = "binary-u32-le"
FORMAT_TEXT = "decimal-text"
FORMATS = (FORMAT_BINARY, FORMAT_TEXT)

DEFAULT_WINDOW = 2048
DEFAULT_NS = (1, 2, 3, 5, 10, 15, 20)
REPORT_HEADER = ["n", "window", "avg_repetitions", "windows_counted"]

_BASE = np.uint64(0x9E3779B97F4A7C15)
_TOKENS_PER_CHUNK = 1 << 20
_U32_MAX = 2 ** 32 - 1


@dataclass
class TokenStream:
    """Token ids (uint32) and where they came from."""
    ids: np.ndarray
    source: str = "<memory>"

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint32)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_ids(cls, ids: Iterable[int], source: str = "<memory>") -> "TokenStream":
        arr = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() > _U32_MAX):
            raise ParameterError("token ids must fit in 32 unsigned bits")
        return cls(arr.astype(np.uint32), source)


def _read_text(path: Path, data: bytes) -> np.ndarray:
    tokens = data.split()
    try:
        arr = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        arr = None
    if arr is None or (arr.size and (arr.min() < 0 or arr.max() > _U32_MAX)):
        for m in re.finditer(rb"\S+", data):
            tok = m.group()
            if not tok.isdigit() or int(tok) > _U32_MAX:
                raise FormatError(f"{path}: bad token {tok[:20]!r}", offset=m.start())
    return arr.astype(np.uint32)


def read_token_stream(path: Union[str, Path], fmt: str = FORMAT_BINARY) -> TokenStream:
    """
    Read a token file.

    Args:
        path: token file
        fmt: "binary-u32-le" (headerless little-endian u32) or "decimal-text"
             (whitespace-separated ids)

    Returns:
        TokenStream
    """
    if fmt not in FORMATS:
        raise ParameterError(f"unknown token format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    data = path.read_bytes()
    if fmt == FORMAT_BINARY:
        tail = len(data) % 4
        if tail:
            raise FormatError(f"{path}: trailing partial word of {tail} bytes", offset=len(data) - tail)
        ids = np.frombuffer(data, dtype="<u4").astype(np.uint32)
    else:
        ids = _read_text(path, data)
    logger.debug(f"read {len(ids)} tokens from {path}")
    return TokenStream(ids, str(path))


def write_token_stream(path: Union[str, Path], stream: TokenStream, fmt: str = FORMAT_BINARY) -> Path:
    path = Path(path)
    if fmt == FORMAT_BINARY:
        path.write_bytes(stream.ids.astype("<u4").tobytes())
    elif fmt == FORMAT_TEXT:
        path.write_text(" ".join(str(int(t)) for t in stream.ids) + "\n")
    else:
        raise ParameterError(f"unknown token format {fmt!r}")
    return path


# =========================================================
# COUNTING
# =========================================================

def ngram_hashes(ids: np.ndarray, n: int) -> np.ndarray:
    """Polynomial hash of every n-gram start position (uint64, wrapping)."""
    count = len(ids) - n + 1
    h = np.zeros(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for j in range(n):
            h = h * _BASE + ids[j:j + count].astype(np.uint64) + np.uint64(1)
    return h


def _exact_distinct(ids: np.ndarray, starts: np.ndarray, n: int) -> int:
    grams = ids[starts[:, None] + np.arange(n)]
    return len(np.unique(grams, axis=0))


def _count_block(ids: np.ndarray, offsets: np.ndarray, window: int, n: int) -> np.ndarray:
    """Repetition counts for windows starting at ``offsets`` (relative to ``ids``)."""
    m = window - n + 1
    hashes = ngram_hashes(ids, n)
    pos = offsets[:, None] + np.arange(m)
    order = np.argsort(hashes[pos], axis=1, kind="stable")
    spos = np.take_along_axis(pos, order, axis=1)
    sh = hashes[spos]
    same = sh[:, 1:] == sh[:, :-1]
    distinct = m - same.sum(axis=1)

    # verify equal-hash neighbours token by token
    rows, cols = np.nonzero(same)
    if len(rows):
        a = spos[rows, cols]
        b = spos[rows, cols + 1]
        span = np.arange(n)
        clash = (ids[a[:, None] + span] != ids[b[:, None] + span]).any(axis=1)
        for w in np.unique(rows[clash]):
            logger.debug(f"hash collision in window at offset {offsets[w]}; recounting exactly")
            distinct[w] = _exact_distinct(ids, pos[w], n)
    return (m - distinct).astype(np.int64)


def _window_starts(length: int, window: int, stride: int) -> np.ndarray:
    return np.arange(0, length - window + 1, stride, dtype=np.int64)


def window_counts(stream: Union[TokenStream, np.ndarray], window: int, n: int,
                  stride: Optional[int] = None, workers: Optional[int] = None) -> np.ndarray:
    """
    Per-window repetition counts.

    Args:
        stream: token stream or id array
        window: window length in tokens
        n: n-gram length
        stride: distance between window starts; default ``window`` (blocked,
                tail remainder dropped); smaller values give sliding windows
        workers: thread count (default: ICLFORGE_THREADS)
    """
    ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream, dtype=np.uint32)
    stride = stride or window
    if n < 1:
        raise ParameterError(f"n-gram length must be positive, got {n}")
    if window < n:
        raise ParameterError(f"window {window} is shorter than n-gram length {n}")
    if stride < 1:
        raise ParameterError(f"stride must be positive, got {stride}")
    if len(ids) < window:
        raise ParameterError(f"stream of {len(ids)} tokens is shorter than window {window}")

    starts = _window_starts(len(ids), window, stride)
    per_chunk = max(1, _TOKENS_PER_CHUNK // max(window, stride))
    jobs = []
    for i in range(0, len(starts), per_chunk):
        block = starts[i:i + per_chunk]
        lo, hi = int(block[0]), int(block[-1]) + window
        jobs.append((ids[lo:hi], block - lo))

    def run(job):
        return _count_block(job[0], job[1], window, n)

    workers = workers or get_settings().threads
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    return np.concatenate(parts)


def window_repetitions(stream: Union[TokenStream, np.ndarray], window: int, n: int,
                       stride: Optional[int] = None, workers: Optional[int] = None) -> float:
    """Mean repetition count over windows."""
    counts = window_counts(stream, window, n, stride, workers)
    return int(counts.sum()) / len(counts)


def brute_force_repetitions(ids: Sequence[int], window: int, n: int, stride: Optional[int] = None) -> float:
    """Quadratic reference counter: every n-gram compared against every earlier one."""
    ids = [int(t) for t in ids]
    stride = stride or window
    totals = []
    for s in range(0, len(ids) - window + 1, stride):
        w = ids[s:s + window]
        grams = [tuple(w[i:i + n]) for i in range(window - n + 1)]
        reps = 0
        for i, g in enumerate(grams):
            if any(g == grams[j] for j in range(i)):
                reps += 1
        totals.append(reps)
    return sum(totals) / len(totals)


# =========================================================
# REPORT
# =========================================================

@dataclass(frozen=True)
class NGramRow:
    n: int
    window: int
    avg_repetitions: float
    windows_counted: int


@dataclass
class NGramReport:
    source: str
    stride: int
    rows: List[NGramRow] = field(default_factory=list)

    def value(self, n: int) -> float:
        for r in self.rows:
            if r.n == n:
                return r.avg_repetitions
        raise KeyError(n)

    def to_csv(self) -> str:
        lines = [",".join(REPORT_HEADER)]
        for r in self.rows:
            lines.append(f"{r.n},{r.window},{r.avg_repetitions!r},{r.windows_counted}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        return path


def report(stream: TokenStream, window: int = DEFAULT_WINDOW, ns: Sequence[int] = DEFAULT_NS,
           stride: Optional[int] = None, workers: Optional[int] = None) -> NGramReport:
    """One row per n, in the order given."""
    stride = stride or window
    out = NGramReport(stream.source, stride)
    for n in ns:
        counts = window_counts(stream, window, n, stride, workers)
        avg = int(counts.sum()) / len(counts)
        out.rows.append(NGramRow(int(n), window, avg, len(counts)))
        logger.info(f"📊 n={n}: {avg:.3f} repetitions per window over {len(counts)} windows")
    return out
