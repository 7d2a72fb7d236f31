"""
Training workflow: store preparation, frozen evaluation suites, per-seed
training with periodic evaluation, probing and checkpointing, and the
multi-seed aggregate.

Run directory layout:

    manifest.json           resolved config, store and suite hashes
    store.exb1              the prepared store every suite refers to
    suites/<name>.icls      frozen evaluation and probe suites
    seed-<s>/metrics.csv    per-seed metric log
    seed-<s>/checkpoints/   step-<n>.iclf at every evaluation point
    metrics.csv             all seeds
    aggregate.csv           per-step mean and std across seeds
"""
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from src.models.checkpoint import load_checkpoint, save_checkpoint
from src.models.config import EvalTask, ExperimentConfig, ModelConfig, StoreConfig, TrainConfig
from src.models.episode import Episode, Suite
from src.models.state import TrainState, create_initial_state
from src.modules.evaluator import evaluate_icl, evaluate_iwl
from src.modules.exemplar_store import (
    ExemplarStore,
    apply_sample_budget,
    class_sampler,
    gen_synthetic_store,
    instance_relabel,
    load_store,
    restrict_base_classes,
    save_store,
    split_holdout,
)
from src.modules.optim import adam_step, clip_global_norm, lr_at
from src.modules.probe import summarize_suite
from src.modules.progress_tracker import MetricLog, aggregate_runs, read_log, write_aggregate, write_rows
from src.modules.sequence_forge import (
    load_suite,
    make_icl_suite,
    make_iwl_suite,
    resolve_batch,
    sample_training_batch,
    save_suite,
    suite_hash,
)
from src.modules.transformer import loss_and_grads
from src.utils.errors import ConfigError, HashMismatchError, NumericError
from src.utils.hashing import sha256_file
from src.utils.logging_utils import get_logger
from src.utils.rng import RngStream
from src.utils.settings import get_settings

logger = get_logger(__name__)

TRAIN_STREAM = 0x7EA1
MANIFEST = "manifest.json"
STORE_FILE = "store.exb1"
PROBE_SUITE = "probe"
TRAIN_LOSS = "train-loss"
IWL_SPLIT = "iwl-acc"


# =========================================================
# STORE AND MODEL RESOLUTION
# =========================================================

def prepare_store(config: StoreConfig) -> ExemplarStore:
    """
    Load or generate the store, then split and reshape it.

    A loaded store that already marks novel classes is taken as split.
    """
    if config.path:
        store = load_store(config.path)
    else:
        store = gen_synthetic_store(config.synthetic)
    if not store.n_novel:
        store = split_holdout(store, config.n_novel, config.split, config.split_seed)
    if config.base_classes is not None:
        store = restrict_base_classes(store, config.base_classes)
    if config.sample_budget is not None:
        store = apply_sample_budget(store, config.sample_budget, config.budget_coefficient)
    if config.instance_discrimination:
        store = instance_relabel(store)
    return store


def resolve_model_config(config: ModelConfig, store: ExemplarStore) -> ModelConfig:
    """Fill label_vocab from the store and check the exemplar shape agrees."""
    if tuple(config.exemplar_shape) != store.shape:
        raise ConfigError(f"model.exemplar_shape {tuple(config.exemplar_shape)} does not match "
                          f"store shape {store.shape}")
    if config.label_vocab is None:
        config = config.model_copy(update={"label_vocab": store.n_base})
    elif config.label_vocab < store.n_base:
        raise ConfigError(f"label_vocab {config.label_vocab} is smaller than the {store.n_base} base classes")
    config.validate_for_init()
    return config


# =========================================================
# ONE OPTIMIZER STEP
# =========================================================

def _dump_numeric_failure(path: Path, step: int, seed: int, batch: Sequence[Episode], reason: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    dump = {
        "step": step,
        "seed": seed,
        "reason": reason,
        "batch": [
            {**asdict(ep.provenance), "target": ep.target,
             "query": [ep.query.class_id, ep.query.index]}
            for ep in batch
        ],
    }
    path.write_text(json.dumps(dump, indent=2))
    logger.error(f"❌ Non-finite training state at step {step}; diagnostics written to {path}")


def train_step(state: TrainState, batch: Sequence[Episode], store: ExemplarStore, config: TrainConfig,
               dump_path: Optional[Path] = None) -> float:
    """
    Apply update number ``state.step + 1`` and return the batch loss.

    Loss is the batch-mean last-token cross-entropy; gradients are clipped to
    ``clip_norm`` and Adam runs at lr_at(step).
    """
    step = state.step + 1
    if len(batch) != config.batch_size:
        raise ConfigError(f"batch of {len(batch)} episodes, train.batch_size is {config.batch_size}")
    exemplars, labels, targets = resolve_batch(store, batch)
    try:
        loss, grads = loss_and_grads(state.model, exemplars, labels, targets)
        if not math.isfinite(loss):
            raise NumericError(f"loss is {loss} at step {step}")
        grads = clip_global_norm(grads, config.clip_norm)
        lr = lr_at(step, config.max_lr, config.warmup_steps)
        params, adam = adam_step(state.model.params, grads, state.adam, lr,
                                 config.adam_beta1, config.adam_beta2, config.adam_eps)
    except NumericError as exc:
        if dump_path is not None:
            _dump_numeric_failure(dump_path, step, state.seed, batch, str(exc))
        raise
    state.model = state.model.with_params(params)
    state.adam = adam
    state.step = step
    return loss


# =========================================================
# RESULTS
# =========================================================

@dataclass
class SeedResult:
    seed: int
    metrics_path: Path
    checkpoints: List[Path] = field(default_factory=list)


@dataclass
class RunResult:
    run_dir: Path
    seeds: List[SeedResult]
    metrics_path: Path
    aggregate_path: Path

    @property
    def checkpoints(self) -> Dict[int, List[Path]]:
        return {s.seed: s.checkpoints for s in self.seeds}


def checkpoint_path(seed_dir: Path, step: int) -> Path:
    return seed_dir / "checkpoints" / f"step-{step:08d}.iclf"


def list_checkpoints(seed_dir: Path) -> List[Path]:
    return sorted((seed_dir / "checkpoints").glob("step-*.iclf"))


def read_manifest(run_dir: Union[str, Path]) -> Dict[str, Any]:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise ConfigError(f"{run_dir} has no {MANIFEST}")
    return json.loads(path.read_text())


def load_run_store(run_dir: Union[str, Path], manifest: Optional[Dict[str, Any]] = None) -> ExemplarStore:
    """Load a run's store and check it against the manifest hash."""
    manifest = manifest or read_manifest(run_dir)
    path = Path(run_dir) / STORE_FILE
    digest = sha256_file(path)
    if digest != manifest["store_hash"]:
        raise HashMismatchError(f"{path} hashes to {digest[:12]}, manifest records {manifest['store_hash'][:12]}")
    return load_store(path)


# =========================================================
# THE WORKFLOW
# =========================================================

class TrainingRun:
    """
    One experiment: every configured seed trained on a shared store and
    shared frozen suites.
    """

    def __init__(self, config: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.run_dir = Path(run_dir or config.output_dir)
        self.store: Optional[ExemplarStore] = None
        self.model_config: Optional[ModelConfig] = None
        self.suites: Dict[str, Suite] = {}
        self.probe_suite: Optional[Suite] = None
        self.class_probs: Optional[np.ndarray] = None
        if config.train.total_steps % config.train.eval_every:
            logger.warning(f"⚠️ total_steps {config.train.total_steps} is not a multiple of eval_every "
                           f"{config.train.eval_every}; the last updates are not evaluated")

    # ---------------------------------------------------------
    # STAGE 1: STORE, SUITES AND MANIFEST
    # ---------------------------------------------------------

    def prepare(self, resume: bool = False):
        """Build (or, when resuming, reload and verify) the store and suites."""
        self.run_dir.mkdir(parents=True, exist_ok=True)
        if resume and (self.run_dir / MANIFEST).exists():
            self._reload()
        else:
            self._build()
        self.class_probs = class_sampler(self.store, self.config.store.zipf)
        logger.info(f"📚 {self.store}")

    def _build(self):
        cfg = self.config
        self.store = prepare_store(cfg.store)
        self.model_config = resolve_model_config(cfg.model, self.store)
        save_store(self.store, self.run_dir / STORE_FILE)
        pairs = self.model_config.pairs
        for task in cfg.eval.eval_tasks:
            self.suites[task.name] = make_icl_suite(self.store, task, cfg.eval.suite_size, cfg.eval.suite_seed, pairs)
        if cfg.eval.iwl:
            self.suites[IWL_SPLIT] = make_iwl_suite(self.store, cfg.eval.suite_size, cfg.eval.suite_seed, pairs)
        if cfg.probe.every:
            task = EvalTask.parse(cfg.probe.task)
            self.probe_suite = make_icl_suite(self.store, task, cfg.probe.episodes, cfg.eval.suite_seed + 1, pairs)
        suites = {}
        for name, suite in self._all_suites().items():
            path = save_suite(suite, self.run_dir / "suites" / f"{name}.icls")
            suites[name] = {"file": str(path.relative_to(self.run_dir)), "hash": suite_hash(suite)}
        manifest = {
            "name": cfg.name,
            "created": datetime.now().isoformat(timespec="seconds"),
            "config": cfg.model_dump(mode="json"),
            "model": self.model_config.model_dump(mode="json"),
            "store_hash": self.store.digest(),
            "store": self.store.summary(),
            "suites": suites,
        }
        (self.run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2))

    def _reload(self):
        manifest = read_manifest(self.run_dir)
        if manifest["config"] != self.config.model_dump(mode="json"):
            raise ConfigError(f"{self.run_dir} was started with a different config; cannot resume")
        self.store = load_run_store(self.run_dir, manifest)
        self.model_config = ModelConfig.model_validate(manifest["model"])
        for name, entry in manifest["suites"].items():
            suite = load_suite(self.run_dir / entry["file"], self.store)
            if suite_hash(suite) != entry["hash"]:
                raise HashMismatchError(f"suite {name} no longer matches the manifest")
            if name == PROBE_SUITE:
                self.probe_suite = suite
            else:
                self.suites[name] = suite

    def _all_suites(self) -> Dict[str, Suite]:
        out = dict(self.suites)
        if self.probe_suite is not None:
            out[PROBE_SUITE] = self.probe_suite
        return out

    # ---------------------------------------------------------
    # STAGE 2: EVALUATION AND PROBING
    # ---------------------------------------------------------

    def evaluate(self, state: TrainState, log: MetricLog):
        """Append one row per frozen suite at the current step."""
        for name, suite in self.suites.items():
            if name == IWL_SPLIT:
                result = evaluate_iwl(state.model, self.store, suite)
            else:
                result = evaluate_icl(state.model, self.store, suite, restrict=self.config.eval.restrict_argmax)
            log.append(state.step, state.seed, name, result.accuracy)

    def probe(self, state: TrainState, log: MetricLog):
        p = self.config.probe
        metrics = summarize_suite(state.model, self.store, self.probe_suite.episodes,
                                  pre_softmax=p.pre_softmax, all_image_mass=p.all_image_mass)
        for split, value in metrics.split_rows():
            log.append(state.step, state.seed, split, value)

    def _checkpoint_due(self, step: int) -> bool:
        return step % self.config.train.eval_every == 0

    def _probe_due(self, step: int) -> bool:
        every = self.config.probe.every
        return bool(every) and self.probe_suite is not None and step % every == 0

    # ---------------------------------------------------------
    # STAGE 3: TRAINING ONE SEED
    # ---------------------------------------------------------

    def train_seed(self, seed: int, resume: bool = False) -> SeedResult:
        """Train one seed to total_steps, resuming from its last checkpoint if asked."""
        train = self.config.train
        seed_dir = self.run_dir / f"seed-{seed}"
        metrics_path = seed_dir / "metrics.csv"
        state = None
        if resume:
            found = list_checkpoints(seed_dir)
            if found:
                ckpt = load_checkpoint(found[-1])
                state = TrainState(ckpt.model, ckpt.adam, ckpt.step, seed)
                logger.info(f"🔄 Seed {seed}: resuming from step {ckpt.step}")
        if state is None:
            if metrics_path.exists():
                metrics_path.unlink()
            for old in list_checkpoints(seed_dir):
                old.unlink()
            state = create_initial_state(self.model_config, seed)
        log = MetricLog(metrics_path)
        result = SeedResult(seed, metrics_path)

        if state.step == 0:
            log.truncate_after(-1)
            self._eval_point(state, log, result, seed_dir)
        else:
            log.truncate_after(state.step)
            result.checkpoints = [p for p in list_checkpoints(seed_dir)
                                  if int(p.stem.split("-")[1]) <= state.step]

        rng = RngStream(seed, TRAIN_STREAM)
        dump = seed_dir / "numeric-abort.json"
        losses: List[float] = []
        bar = tqdm(range(state.step + 1, train.total_steps + 1), desc=f"seed {seed}", file=sys.stderr,
                   disable=not get_settings().progress, initial=state.step, total=train.total_steps)
        for step in bar:
            batch = sample_training_batch(self.store, self.config.mix, self.config.recipe, rng, step=step,
                                          batch_size=train.batch_size, pairs=self.model_config.pairs,
                                          probs=self.class_probs)
            loss = train_step(state, batch, self.store, train, dump_path=dump)
            losses.append(loss)
            if self._checkpoint_due(step):
                log.append(step, seed, TRAIN_LOSS, float(np.mean(losses)))
                losses = []
                self._eval_point(state, log, result, seed_dir)
                bar.set_postfix(loss=f"{loss:.3f}")
            elif self._probe_due(step):
                self.probe(state, log)
        bar.close()
        logger.info(f"✅ Seed {seed}: {train.total_steps} steps done")
        return result

    def _eval_point(self, state: TrainState, log: MetricLog, result: SeedResult, seed_dir: Path):
        self.evaluate(state, log)
        if self._probe_due(state.step):
            self.probe(state, log)
        path = save_checkpoint(checkpoint_path(seed_dir, state.step), state.model, state.adam,
                               {"step": state.step, "seed": state.seed, "name": self.config.name})
        result.checkpoints.append(path)

    # ---------------------------------------------------------
    # STAGE 4: ALL SEEDS AND THE AGGREGATE
    # ---------------------------------------------------------

    def run(self, resume: bool = False) -> RunResult:
        self.prepare(resume)
        seeds = [self.train_seed(s, resume) for s in self.config.train.seeds]
        logs = [read_log(s.metrics_path) for s in seeds]
        metrics_path = self.run_dir / "metrics.csv"
        write_rows(metrics_path, [r for log in logs for r in log.rows])
        aggregate_path = self.run_dir / "aggregate.csv"
        write_aggregate(aggregate_path, aggregate_runs(logs))
        logger.info(f"🎉 Run complete: {self.run_dir}")
        return RunResult(self.run_dir, seeds, metrics_path, aggregate_path)


def train_run(config: ExperimentConfig, run_dir: Optional[Union[str, Path]] = None,
              resume: bool = False) -> RunResult:
    """Train every seed of an experiment and write the run directory."""
    return TrainingRun(config, run_dir).run(resume)
