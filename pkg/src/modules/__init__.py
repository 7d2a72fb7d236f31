"""
ICL Forge - Modules package.
Contains the numeric core, the model, data stores, sequence building,
evaluation, probing and corpus statistics.
"""
from src.modules.transformer import TransformerModel, init_model, forward, loss_and_grads
from src.modules.exemplar_store import ExemplarStore, gen_synthetic_store, load_store, save_store
from src.modules.sequence_forge import sample_training_batch, make_icl_suite, make_iwl_suite
from src.modules.evaluator import EvaluationResult, evaluate_icl, evaluate_iwl
from src.modules.progress_tracker import MetricLog, aggregate_runs
from src.modules.probe import ProgressMetrics, HeadScoreSeries, capture_trace, summarize_suite
from src.modules.ngram import TokenStream, NGramReport, read_token_stream, window_repetitions, report

__all__ = [
    "TransformerModel",
    "init_model",
    "forward",
    "loss_and_grads",
    "ExemplarStore",
    "gen_synthetic_store",
    "load_store",
    "save_store",
    "sample_training_batch",
    "make_icl_suite",
    "make_iwl_suite",
    "EvaluationResult",
    "evaluate_icl",
    "evaluate_iwl",
    "MetricLog",
    "aggregate_runs",
    "ProgressMetrics",
    "HeadScoreSeries",
    "capture_trace",
    "summarize_suite",
    "TokenStream",
    "NGramReport",
    "read_token_stream",
    "window_repetitions",
    "report"
]
