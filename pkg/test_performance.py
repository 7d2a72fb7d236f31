"""
Performance Testing Suite for ICL Forge
=======================================
Measures throughput across the hot paths:
- Training steps (forward, backward, Adam)
- Batched evaluation
- Attention probing
- N-gram repetition counting
"""

import json
import sys
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from pathlib import Path
from typing import Callable, List

import numpy as np

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.data.profiles import get_profile_by_id
from src.models.config import EvalTask, build_experiment
from src.models.state import create_initial_state
from src.modules.evaluator import evaluate_icl
from src.modules.ngram import TokenStream, report
from src.modules.probe import summarize_suite
from src.modules.sequence_forge import make_icl_suite, sample_training_batch
from src.pipeline.training_run import TRAIN_STREAM, prepare_store, resolve_model_config, train_step
from src.utils.rng import RngStream


# =========================================================
# DATA CLASSES FOR RESULTS
# =========================================================

@dataclass
class BenchResult:
    """Single benchmark result"""
    name: str
    success: bool
    seconds: float
    items: int
    unit: str
    error: str = None

    @property
    def rate(self) -> float:
        return self.items / self.seconds if self.seconds > 0 else 0.0


@dataclass
class PerformanceReport:
    """Overall performance report"""
    profile: str
    results: List[BenchResult]
    timestamp: str


# =========================================================
# BENCHMARKS
# =========================================================

def _timed(name: str, unit: str, fn: Callable[[], int]) -> BenchResult:
    print(f"\n{'='*60}")
    print(f"Benchmark: {name}")
    print(f"{'='*60}")
    start = time.perf_counter()
    try:
        items = fn()
        result = BenchResult(name, True, time.perf_counter() - start, items, unit)
        print(f"  ✓ {items} {unit} in {result.seconds:.2f}s ({result.rate:,.1f} {unit}/s)")
    except Exception as e:
        result = BenchResult(name, False, time.perf_counter() - start, 0, unit, str(e))
        print(f"  ❌ Error: {e}")
    return result


def run_benchmarks(profile: str = "smoke", steps: int = 20, episodes: int = 256,
                   tokens: int = 2_000_000) -> PerformanceReport:
    """Run all benchmarks on a profile's store and model."""
    print("\n" + "="*70)
    print("🧪 ICL FORGE - PERFORMANCE TEST SUITE")
    print("="*70)
    print(f"Profile: {profile}")
    print(f"Started at: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")

    config = build_experiment({"profile": profile})
    store = prepare_store(config.store)
    model_config = resolve_model_config(config.model, store)
    state = create_initial_state(model_config, seed=0)
    rng = RngStream(0, TRAIN_STREAM)
    task = EvalTask.parse(config.eval.tasks[0])
    suite = make_icl_suite(store, task, episodes, seed=1, pairs=model_config.pairs)

    def train():
        for step in range(1, steps + 1):
            batch = sample_training_batch(store, config.mix, config.recipe, rng, step=step,
                                          batch_size=config.train.batch_size, pairs=model_config.pairs)
            train_step(state, batch, store, config.train)
        return steps * config.train.batch_size

    def evaluate():
        return evaluate_icl(state.model, store, suite).total

    def probe():
        summarize_suite(state.model, store, suite.episodes)
        return len(suite)

    def ngram():
        ids = np.random.default_rng(0).integers(0, 50_000, size=tokens).astype(np.uint32)
        report(TokenStream(ids, "random"), ns=[1, 5, 20])
        return tokens * 3

    results = [
        _timed("training steps", "episodes", train),
        _timed("icl evaluation", "episodes", evaluate),
        _timed("attention probe", "episodes", probe),
        _timed("n-gram counting", "tokens", ngram),
    ]
    return PerformanceReport(profile, results, datetime.now().isoformat())


def print_report(report: PerformanceReport):
    """Print formatted performance report"""
    print("\n")
    print("="*70)
    print("📊 PERFORMANCE TEST REPORT")
    print("="*70)
    print()
    print("┌──────────────────────┬──────┬──────────┬────────────────────────┐")
    print("│ Benchmark            │ Pass │ Time     │ Throughput             │")
    print("├──────────────────────┼──────┼──────────┼────────────────────────┤")
    for r in report.results:
        status = "✅" if r.success else "❌"
        rate = f"{r.rate:,.1f} {r.unit}/s"
        print(f"│ {r.name:<20} │  {status}  │ {r.seconds:>7.2f}s │ {rate:<22} │")
    print("└──────────────────────┴──────┴──────────┴────────────────────────┘")
    print()
    print(f"📅 Test completed at: {report.timestamp}")


def save_report(report: PerformanceReport, filename: str = None):
    """Save report to JSON file"""
    if filename is None:
        filename = f"performance_report_{datetime.now().strftime('%Y%m%d_%H%M%S')}.json"

    report_dict = {
        "profile": report.profile,
        "timestamp": report.timestamp,
        "results": [{**asdict(r), "rate": r.rate} for r in report.results],
    }
    with open(filename, "w") as f:
        json.dump(report_dict, f, indent=2)

    print(f"📁 Report saved to: {filename}")


# =========================================================
# MAIN
# =========================================================

if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description="Performance Testing for ICL Forge")
    parser.add_argument("--profile", type=str, default="smoke", help="Profile whose store and model are timed")
    parser.add_argument("--steps", type=int, default=20, help="Training steps to time")
    parser.add_argument("--episodes", type=int, default=256, help="Evaluation and probe episodes")
    parser.add_argument("--save", action="store_true", help="Save report to JSON file")

    args = parser.parse_args()

    if get_profile_by_id(args.profile) is None:
        parser.error(f"unknown profile {args.profile!r}")
    bench = run_benchmarks(args.profile, args.steps, args.episodes)
    print_report(bench)
    if args.save:
        save_report(bench)
