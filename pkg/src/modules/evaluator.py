"""
Suite evaluation: few-shot (in-context) and held-out (in-weights) accuracy.

Episodes are resolved and run in fixed-size chunks. Chunks may be spread over
a thread pool capped by ICLFORGE_THREADS; results are reduced in episode order.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from src.models.episode import KIND_ICL, KIND_IWL, Episode, Suite
from src.modules.exemplar_store import ExemplarStore
from src.modules.sequence_forge import resolve_batch
from src.modules.transformer import TransformerModel, final_logits
from src.utils.errors import EvalError
from src.utils.logging_utils import get_logger
from src.utils.settings import get_settings

logger = get_logger(__name__)

CHUNK = 256
RASTER_CHUNK = 16


@dataclass
class EvaluationResult:
    """Accuracy of one model on one suite."""
    split: str
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def __str__(self) -> str:
        return f"{self.split}: {self.accuracy * 100:.2f}% ({self.correct}/{self.total})"


def _chunks(episodes: Sequence[Episode], size: int) -> List[Sequence[Episode]]:
    return [episodes[i:i + size] for i in range(0, len(episodes), size)]


def predict(model: TransformerModel, store: ExemplarStore, episodes: Sequence[Episode],
            restrict_to: Optional[int] = None, workers: Optional[int] = None) -> np.ndarray:
    """
    Argmax of the query-position logits for every episode.

    Args:
        restrict_to: only labels 0..restrict_to-1 compete for the argmax
        workers: thread count (default: ICLFORGE_THREADS)
    """
    def run(chunk):
        exemplars, labels, _ = resolve_batch(store, chunk)
        logits = final_logits(model, exemplars, labels)
        if restrict_to is not None:
            logits = logits[:, :restrict_to]
        return logits.argmax(axis=-1)

    size = CHUNK if model.config.embedder == "linear-vector" else RASTER_CHUNK
    chunks = _chunks(list(episodes), size)
    workers = workers or get_settings().threads
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def evaluate_icl(model: TransformerModel, store: ExemplarStore, suite: Suite, k: Optional[int] = None,
                 restrict: bool = True) -> EvaluationResult:
    """
    Few-shot accuracy on a k-way suite.

    With ``restrict`` the prediction is the argmax over the k remapped labels
    only; otherwise over the full label vocabulary.
    """
    k = k or suite.k_way
    if not k:
        raise EvalError(f"suite {suite.name} does not state k")
    for ep in suite.episodes:
        if ep.provenance.kind != KIND_ICL or ep.target >= k or max(ep.context_labels) >= k:
            raise EvalError(f"suite {suite.name} holds an episode that is not {k}-way: {ep}")
    preds = predict(model, store, suite.episodes, restrict_to=k if restrict else None)
    targets = np.array([ep.target for ep in suite.episodes])
    return EvaluationResult(suite.name, int((preds == targets).sum()), len(targets))


def evaluate_iwl(model: TransformerModel, store: ExemplarStore, suite: Suite) -> EvaluationResult:
    """Held-out accuracy with the argmax over the full label vocabulary."""
    for ep in suite.episodes:
        if ep.provenance.kind != KIND_IWL or ep.query_class_positions():
            raise EvalError(f"suite {suite.name} holds an episode with query-class context: {ep}")
    preds = predict(model, store, suite.episodes)
    targets = np.array([ep.target for ep in suite.episodes])
    return EvaluationResult("iwl-acc", int((preds == targets).sum()), len(targets))


def evaluate_suite(model: TransformerModel, store: ExemplarStore, suite: Suite,
                   restrict: bool = True) -> EvaluationResult:
    """Dispatch on the suite kind."""
    if suite.kind == KIND_IWL:
        result = evaluate_iwl(model, store, suite)
    else:
        result = evaluate_icl(model, store, suite, restrict=restrict)
    logger.debug(str(result))
    return result
