"""
Attention probes tracking induction-head formation.

Four per-(layer, head) statistics are read off captured attention:

    image-image-diag   sample rows p >= 2 -> the preceding sample at p-2
    label-image        label rows p -> their own sample at p-1
    image-image-query  query row -> context samples of the query's class
    image-label        query row -> label tokens carrying the target label

The first two are defined for every episode; the query metrics only for
episodes that actually contain matching context items.
"""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np

from src.models.episode import Episode, Suite
from src.models.trace import ROLE_LABEL, ROLE_QUERY, ROLE_SAMPLE, AttentionTrace
from src.modules.exemplar_store import ExemplarStore
from src.modules.sequence_forge import resolve_batch
from src.modules.transformer import TransformerModel, embed_tokens, forward_batch, traces_from_cache
from src.utils.errors import FormatError, SeriesError
from src.utils.logging_utils import get_logger

if TYPE_CHECKING:
    from src.models.checkpoint import Checkpoint

logger = get_logger(__name__)

METRICS = ("image-image-diag", "label-image", "image-image-query", "image-label")
CHUNK = 64


def _matrix(trace: AttentionTrace, use_scores: bool) -> np.ndarray:
    if use_scores:
        if trace.scores is None:
            raise ValueError("trace was captured without pre-softmax scores")
        return trace.scores
    return trace.weights


# =========================================================
# CAPTURE
# =========================================================

def capture_traces(model: TransformerModel, store: ExemplarStore, episodes: Sequence[Episode],
                   pre_softmax: bool = False):
    """Returns (logits [B, T, V], one AttentionTrace per episode)."""
    exemplars, labels, _ = resolve_batch(store, episodes)
    x, _ = embed_tokens(model, exemplars, labels)
    logits, cache = forward_batch(model, x, capture_scores=pre_softmax)
    return logits, traces_from_cache(cache, model.config.pairs)


def capture_trace(model: TransformerModel, episode: Episode, store: ExemplarStore,
                  pre_softmax: bool = False) -> AttentionTrace:
    return capture_traces(model, store, [episode], pre_softmax)[1][0]


# =========================================================
# METRICS
# =========================================================

def metric_label_image(trace: AttentionTrace, use_scores: bool = False) -> np.ndarray:
    """Mean over label rows p of A[p, p-1]; [layers, heads]."""
    A = _matrix(trace, use_scores)
    rows = np.array(trace.positions(ROLE_LABEL))
    return A[:, :, rows, rows - 1].mean(axis=-1)


def metric_image_image_diag(trace: AttentionTrace, all_image_mass: bool = False,
                            use_scores: bool = False) -> np.ndarray:
    """
    Mean over sample rows p >= 2 of A[p, p-2].

    With ``all_image_mass`` each row contributes its total mass on earlier
    sample positions instead of the single offset-2 entry.
    """
    A = _matrix(trace, use_scores)
    rows = np.array([p for p in trace.positions(ROLE_SAMPLE) if p >= 2])
    if not len(rows):
        return np.zeros(A.shape[:2])
    if not all_image_mass:
        return A[:, :, rows, rows - 2].mean(axis=-1)
    samples = np.array(trace.positions(ROLE_SAMPLE))
    mass = [A[:, :, p, samples[samples < p]].sum(axis=-1) for p in rows]
    return np.mean(mass, axis=0)


def _query_row(trace: AttentionTrace, use_scores: bool) -> np.ndarray:
    return _matrix(trace, use_scores)[:, :, trace.positions(ROLE_QUERY)[0], :]


def metric_image_image_query(trace: AttentionTrace, episode: Episode,
                             use_scores: bool = False) -> Optional[np.ndarray]:
    """Query-row mass on context samples of the query's class, or None when there are none."""
    cols = [2 * i for i in episode.query_class_positions()]
    if not cols:
        return None
    return _query_row(trace, use_scores)[:, :, cols].sum(axis=-1)


def metric_image_label(trace: AttentionTrace, episode: Episode,
                       use_scores: bool = False) -> Optional[np.ndarray]:
    """Query-row mass on label tokens equal to the target, or None when no label matches."""
    cols = [2 * i + 1 for i, label in enumerate(episode.context_labels) if label == episode.target]
    if not cols:
        return None
    return _query_row(trace, use_scores)[:, :, cols].sum(axis=-1)


# =========================================================
# SUITE SUMMARIES
# =========================================================

@dataclass
class ProgressMetrics:
    """Suite-averaged metrics, each [layers, heads]; counts of contributing episodes."""
    values: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def max_over_heads(self, metric: str) -> np.ndarray:
        """Per-layer max over heads."""
        return self.values[metric].max(axis=1)

    def overall_max(self, metric: str) -> float:
        return float(self.values[metric].max())

    def split_rows(self) -> List[tuple]:
        """(split name, value) pairs in the metric-log naming scheme."""
        rows = []
        for metric in METRICS:
            if metric not in self.values:
                continue
            v = self.values[metric]
            for l in range(v.shape[0]):
                for h in range(v.shape[1]):
                    rows.append((f"probe-{metric}-L{l}H{h}", float(v[l, h])))
            rows.append((f"probe-{metric}-max", float(v.max())))
        return rows


def summarize_suite(model: TransformerModel, store: ExemplarStore, episodes: Sequence[Episode],
                    pre_softmax: bool = False, all_image_mass: bool = False) -> ProgressMetrics:
    """
    Average the four metrics over a suite.

    Query metrics average only over episodes where they are defined; a metric
    defined nowhere is left out.
    """
    cfg = model.config
    sums = {m: np.zeros((cfg.layers, cfg.heads)) for m in METRICS}
    counts = {m: 0 for m in METRICS}
    episodes = list(episodes)
    for i in range(0, len(episodes), CHUNK):
        chunk = episodes[i:i + CHUNK]
        _, traces = capture_traces(model, store, chunk, pre_softmax)
        for ep, tr in zip(chunk, traces):
            found = {
                "image-image-diag": metric_image_image_diag(tr, all_image_mass, pre_softmax),
                "label-image": metric_label_image(tr, pre_softmax),
                "image-image-query": metric_image_image_query(tr, ep, pre_softmax),
                "image-label": metric_image_label(tr, ep, pre_softmax),
            }
            for m, v in found.items():
                if v is not None:
                    sums[m] += v
                    counts[m] += 1
    out = ProgressMetrics()
    for m in METRICS:
        if counts[m]:
            out.values[m] = sums[m] / counts[m]
            out.counts[m] = counts[m]
    return out


@dataclass
class HeadScoreSeries:
    """Previous-token (label-image) score per checkpoint step, [n, layers, heads]."""
    steps: List[int]
    scores: np.ndarray

    def max_over_heads(self) -> np.ndarray:
        return self.scores.reshape(len(self.steps), -1).max(axis=1)


def prev_token_score_series(checkpoints: Sequence["Checkpoint"], store: ExemplarStore,
                            suite: Union[Suite, Sequence[Episode]]) -> HeadScoreSeries:
    """Suite-averaged label-image score for every checkpoint, ordered by step."""
    if not checkpoints:
        raise SeriesError("no checkpoints in the series")
    ordered = sorted(checkpoints, key=lambda c: c.step)
    config = ordered[0].model.config
    for c in ordered[1:]:
        if c.model.config != config:
            raise SeriesError(f"checkpoint at step {c.step} has a different model config")
    episodes = list(suite)
    scores = []
    for c in ordered:
        sums = np.zeros((config.layers, config.heads))
        for i in range(0, len(episodes), CHUNK):
            _, traces = capture_traces(c.model, store, episodes[i:i + CHUNK])
            for tr in traces:
                sums += metric_label_image(tr)
        scores.append(sums / len(episodes))
        logger.debug(f"step {c.step}: max label-image {scores[-1].max():.4f}")
    return HeadScoreSeries([c.step for c in ordered], np.stack(scores))


# =========================================================
# TRACE EXPORT
# =========================================================

def export_trace(trace: AttentionTrace, path: Union[str, Path]) -> Path:
    """Write L{l}H{h}.csv matrices plus roles.csv into a directory."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for l in range(trace.layers):
        for h in range(trace.heads):
            with open(out / f"L{l}H{h}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                for row in trace.head(l, h):
                    writer.writerow([repr(float(v)) for v in row])
    with open(out / "roles.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "role"])
        for i, role in enumerate(trace.roles):
            writer.writerow([i, role])
    return out


def load_trace(path: Union[str, Path]) -> AttentionTrace:
    src = Path(path)
    with open(src / "roles.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        roles = [role for _, role in reader]
    files = sorted(src.glob("L*H*.csv"))
    if not files:
        raise FormatError(f"{src}: no trace matrices")
    index = {}
    for f in files:
        l, h = f.stem[1:].split("H")
        index[(int(l), int(h))] = np.loadtxt(f, delimiter=",", ndmin=2)
    layers = 1 + max(l for l, _ in index)
    heads = 1 + max(h for _, h in index)
    T = len(roles)
    weights = np.zeros((layers, heads, T, T))
    for (l, h), m in index.items():
        if m.shape != (T, T):
            raise FormatError(f"{src}: matrix L{l}H{h} has shape {m.shape}, roles give {T}")
        weights[l, h] = m
    return AttentionTrace(weights=weights, roles=roles)
