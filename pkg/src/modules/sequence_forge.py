"""
Episode construction for training and evaluation.

Training episodes are standard (L+1 distinct classes) or bursty (repeated
query-class items among distractor groups), optionally with exact copies of
the query and label swapping. Evaluation episodes are k-way n-shot over novel
classes (in-context) or standard-format over held-out exemplars of base
classes (in-weights). Builders are pure functions of (store, rng stream).
"""
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models.config import DEFAULT_SWAP_RATE, EvalTask, Recipe, TrainingMix
from src.models.episode import (
    EPISODE_KINDS,
    KIND_BURSTY,
    KIND_ICL,
    KIND_IWL,
    KIND_STANDARD,
    Episode,
    ExemplarRef,
    Provenance,
    Suite,
)
from src.modules.exemplar_store import ExemplarStore
from src.utils.binio import BinaryReader, BinaryWriter
from src.utils.errors import ConfigError, EvalError, FormatError, HashMismatchError, ParameterError, RecipeError
from src.utils.hashing import sha256_bytes
from src.utils.logging_utils import get_logger
from src.utils.rng import RngStream

logger = get_logger(__name__)

SUITE_STREAM = 0x5017E
SUITE_MAGIC = b"ICLS"
SUITE_VERSION = 1
_NONE32 = 0xFFFFFFFF

EpisodeBuilder = Callable[[RngStream], Episode]


# =========================================================
# BURSTINESS FORMAT
# =========================================================

_FORMAT_TOKEN = re.compile(r"^(?:(\d+)x)?([A-Z])$")


@dataclass(frozen=True)
class BurstFormat:
    """Query-class repetitions plus the size of each distractor class group."""
    query_reps: int
    distractors: Tuple[int, ...]

    @property
    def pairs(self) -> int:
        return self.query_reps + sum(self.distractors)

    def __str__(self) -> str:
        def tok(n, letter):
            return letter if n == 1 else f"{n}x{letter}"
        parts = [tok(self.query_reps, "Q")] if self.query_reps else []
        letters = [chr(ord("A") + i) for i in range(26) if chr(ord("A") + i) != "Q"]
        parts += [tok(n, letters[i]) for i, n in enumerate(self.distractors)]
        return "-".join(parts)


def parse_format(text: str) -> BurstFormat:
    """
    Parse the dash-separated notation, e.g. '3xQ-3xA-B-C' or 'Q-A-B-C-D-E-F-G'.

    'Q' is the query class; every other letter is one distractor class.
    """
    reps, groups, seen = 0, [], set()
    for token in text.strip().split("-"):
        m = _FORMAT_TOKEN.match(token.strip())
        if not m:
            raise RecipeError(f"bad burstiness token {token!r} in {text!r}")
        count, letter = int(m.group(1) or 1), m.group(2)
        if count < 1 or letter in seen:
            raise RecipeError(f"bad burstiness token {token!r} in {text!r}")
        seen.add(letter)
        if letter == "Q":
            reps = count
        else:
            groups.append(count)
    return BurstFormat(reps, tuple(groups))


def default_format(query_reps: int, pairs: int) -> BurstFormat:
    """
    One distractor group as large as the query group, singletons for the rest;
    3 reps over 8 pairs gives 3xQ-3xA-B-C, 1 rep gives Q-A-B-C-D-E-F-G.
    """
    remaining = pairs - query_reps
    if remaining < 0:
        raise RecipeError(f"{query_reps} query repetitions do not fit {pairs} pairs")
    groups: List[int] = []
    if query_reps >= 2 and remaining >= query_reps:
        groups.append(query_reps)
        remaining -= query_reps
    groups += [1] * remaining
    return BurstFormat(query_reps, tuple(groups))


def resolve_format(recipe: Recipe, pairs: int) -> BurstFormat:
    if recipe.distractor_format:
        fmt = parse_format(recipe.distractor_format)
        if fmt.query_reps != recipe.query_class_reps:
            raise RecipeError(f"format {recipe.distractor_format!r} has {fmt.query_reps} query items, "
                              f"recipe says {recipe.query_class_reps}")
    else:
        fmt = default_format(recipe.query_class_reps, pairs)
    if fmt.pairs != pairs:
        raise RecipeError(f"format {fmt} fills {fmt.pairs} pairs, sequences have {pairs}")
    return fmt


# =========================================================
# TRAINING EPISODES
# =========================================================

def _draw_classes(rng: RngStream, ids: np.ndarray, probs: Optional[np.ndarray], k: int, what: str) -> List[int]:
    if len(ids) < k:
        raise RecipeError(f"need {k} {what} classes, only {len(ids)} available")
    p = None
    if probs is not None:
        p = probs / probs.sum()
        if np.count_nonzero(p) < k:
            raise RecipeError(f"need {k} {what} classes with nonzero probability")
    return [int(c) for c in rng.choice(ids, size=k, replace=False, p=p)]


def _pick(rng: RngStream, pool: np.ndarray, k: int) -> List[int]:
    """k distinct indices from pool, uniformly."""
    return [int(i) for i in rng.choice(pool, size=k, replace=False)]


def _shuffled(items: List[Tuple[ExemplarRef, int]], rng: RngStream):
    order = rng.permutation(len(items))
    return tuple((items[i][0], items[i][1]) for i in order)


def build_standard(store: ExemplarStore, rng: RngStream, pairs: int = 8,
                   probs: Optional[np.ndarray] = None) -> Episode:
    """
    L context pairs from L distinct classes; query from a further class.

    Args:
        probs: class_sampler table over base classes (None = uniform)
    """
    ids = np.array(store.base_class_ids)
    mask = store.train_counts() >= 1
    chosen = _draw_classes(rng, ids[mask], None if probs is None else probs[mask], pairs + 1, "base")
    q_class, ctx_classes = chosen[0], chosen[1:]
    q_pool = store.train_indices(q_class)
    query = ExemplarRef(q_class, int(q_pool[rng.integers(len(q_pool))]))
    items = []
    for c in ctx_classes:
        pool = store.train_indices(c)
        items.append((ExemplarRef(c, int(pool[rng.integers(len(pool))])), store.label_of(c)))
    return Episode(
        context=_shuffled(items, rng),
        query=query,
        target=store.label_of(q_class),
        provenance=Provenance(kind=KIND_STANDARD, recipe="standard", query_class=q_class),
    )


def build_bursty(store: ExemplarStore, rng: RngStream, recipe: Recipe, pairs: int = 8,
                 probs: Optional[np.ndarray] = None, copies: bool = False) -> Episode:
    """
    Bursty episode per the recipe's format.

    Without copies the query-class context items are distinct exemplars that
    also differ from the query. With ``copies`` they are the query exemplar
    itself, which only needs one train exemplar in the query class.
    """
    if recipe.variant != "bursty":
        raise RecipeError("build_bursty needs a bursty recipe")
    fmt = resolve_format(recipe, pairs)
    ids = np.array(store.base_class_ids)
    counts = store.train_counts()
    weights = np.ones(len(ids)) if probs is None else np.asarray(probs, dtype=np.float64)

    need = 1 if copies else fmt.query_reps + 1
    eligible = counts >= need
    if not eligible.any():
        raise RecipeError(f"no base class holds the {need} train exemplars the recipe needs")
    q_class = _draw_classes(rng, ids[eligible], weights[eligible], 1, "query")[0]

    q_pool = store.train_indices(q_class)
    if copies:
        q_index = int(q_pool[rng.integers(len(q_pool))])
        ctx_idx = [q_index] * fmt.query_reps
    else:
        picked = _pick(rng, q_pool, fmt.query_reps + 1)
        q_index, ctx_idx = picked[0], picked[1:]
    q_label = store.label_of(q_class)
    items = [(ExemplarRef(q_class, i), q_label) for i in ctx_idx]

    used = ids == q_class
    for size in fmt.distractors:
        mask = (counts >= size) & ~used
        if not mask.any():
            raise RecipeError(f"no distractor class holds {size} train exemplars")
        c = _draw_classes(rng, ids[mask], weights[mask], 1, "distractor")[0]
        used |= ids == c
        label = store.label_of(c)
        items += [(ExemplarRef(c, i), label) for i in _pick(rng, store.train_indices(c), size)]

    return Episode(
        context=_shuffled(items, rng),
        query=ExemplarRef(q_class, q_index),
        target=q_label,
        provenance=Provenance(kind=KIND_BURSTY, recipe=str(fmt), query_class=q_class, copies=copies),
    )


def apply_inst_copy(episode: Episode, rng: Optional[RngStream] = None) -> Episode:
    """Replace every query-class context item by the query exemplar itself."""
    positions = episode.query_class_positions()
    if episode.provenance.kind != KIND_BURSTY or not positions:
        raise RecipeError("instCopy needs a bursty episode with query-class context items")
    context = list(episode.context)
    for i in positions:
        context[i] = (episode.query, context[i][1])
    return replace(episode, context=tuple(context), provenance=replace(episode.provenance, copies=True))


def apply_label_swap(episode: Episode, store: ExemplarStore, rng: RngStream,
                     p: float = DEFAULT_SWAP_RATE) -> Episode:
    """
    With probability p relabel the query class to a different base label.

    Every query-class context item takes the same new label. One uniform draw
    is consumed whatever p is.
    """
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"swap probability {p} outside [0, 1]")
    if rng.random() >= p:
        return episode
    if store.n_base < 2:
        raise RecipeError("label swapping needs at least two base classes")
    original = episode.target
    r = int(rng.integers(store.n_base - 1))
    new = r + 1 if r >= original else r
    qc = episode.query.class_id
    context = tuple((ref, new if ref.class_id == qc else label) for ref, label in episode.context)
    prov = replace(episode.provenance, swapped=True, original_label=original)
    return replace(episode, context=context, target=new, provenance=prov)


def sample_training_batch(store: ExemplarStore, mix: TrainingMix, recipe: Recipe, rng: RngStream,
                          step: int = 0, batch_size: Optional[int] = None, pairs: int = 8,
                          probs: Optional[np.ndarray] = None) -> List[Episode]:
    """
    One training batch. Slot i of step s draws only from rng.child(s, i).

    A slot is bursty with probability p_bursty (bursty recipes only), gets
    exact copies with probability inst_copy_prob when the recipe enables
    them, and is label-swapped with probability p_label_swap.
    """
    size = batch_size or mix.batch_size
    if not size:
        raise ConfigError("batch size is unresolved")
    episodes = []
    for slot in range(size):
        r = rng.child(step, slot)
        if recipe.variant == "bursty" and r.random() < mix.p_bursty:
            copies = recipe.inst_copy and r.random() < recipe.inst_copy_prob
            ep = build_bursty(store, r, recipe, pairs, probs, copies=copies)
        else:
            ep = build_standard(store, r, pairs, probs)
        episodes.append(apply_label_swap(ep, store, r, mix.p_label_swap))
    return episodes


# =========================================================
# EVALUATION EPISODES
# =========================================================

def build_icl_eval(store: ExemplarStore, task: EvalTask, rng: RngStream, pairs: int = 8) -> Episode:
    """
    k-way n-shot episode over novel classes with labels remapped onto 0..k-1.

    The query is a further exemplar of one of the k classes, never one that
    appears in the context.
    """
    k, n = task.k_way, task.n_shot
    if k * n != pairs:
        raise EvalError(f"{task.name} needs {k * n} pairs, sequences have {pairs}")
    novel = np.array(store.novel_class_ids)
    if len(novel) < k:
        raise EvalError(f"{task.name} needs {k} novel classes, store has {len(novel)}")
    classes = [int(c) for c in rng.choice(novel, size=k, replace=False)]
    q_slot = int(rng.integers(k))
    labels = rng.permutation(k)
    remap = {c: int(labels[j]) for j, c in enumerate(classes)}
    items, query = [], None
    for j, c in enumerate(classes):
        need = n + (1 if j == q_slot else 0)
        size = len(store.record(c))
        if size < need:
            raise EvalError(f"novel class {c} has {size} exemplars, {task.name} needs {need}")
        picked = _pick(rng, np.arange(size), need)
        if j == q_slot:
            query, picked = ExemplarRef(c, picked[0]), picked[1:]
        items += [(ExemplarRef(c, i), remap[c]) for i in picked]
    return Episode(
        context=_shuffled(items, rng),
        query=query,
        target=remap[query.class_id],
        provenance=Provenance(kind=KIND_ICL, recipe=task.name, query_class=query.class_id,
                              label_remap=tuple(sorted(remap.items()))),
    )


def build_iwl_eval(store: ExemplarStore, rng: RngStream, pairs: int = 8) -> Episode:
    """Standard-format episode whose query is a validation exemplar of a base class."""
    ids = np.array(store.base_class_ids)
    has_valid = store.validation_counts() > 0
    if not has_valid.any():
        raise EvalError("no validation-tagged exemplars for in-weights evaluation")
    q_class = int(rng.choice(ids[has_valid]))
    v_pool = store.validation_indices(q_class)
    query = ExemplarRef(q_class, int(v_pool[rng.integers(len(v_pool))]))
    others = ids[(ids != q_class) & (store.train_counts() >= 1)]
    if len(others) < pairs:
        raise EvalError(f"in-weights episodes need {pairs} further base classes, {len(others)} available")
    items = []
    for c in rng.choice(others, size=pairs, replace=False):
        c = int(c)
        pool = store.train_indices(c)
        items.append((ExemplarRef(c, int(pool[rng.integers(len(pool))])), store.label_of(c)))
    return Episode(
        context=_shuffled(items, rng),
        query=query,
        target=store.label_of(q_class),
        provenance=Provenance(kind=KIND_IWL, recipe="iwl", query_class=q_class),
    )


def presample_suite(builder: EpisodeBuilder, count: int, seed: int, name: str = "suite",
                    k_way: int = 0, n_shot: int = 0, store_hash: Optional[str] = None) -> Suite:
    """Freeze count episodes; episode i draws from its own child stream of seed."""
    if count < 1:
        raise ParameterError(f"suite size must be >= 1, got {count}")
    root = RngStream(seed, SUITE_STREAM)
    episodes = tuple(builder(root.child(i)) for i in range(count))
    suite = Suite(name=name, kind=episodes[0].provenance.kind, episodes=episodes, seed=seed,
                  k_way=k_way, n_shot=n_shot, store_hash=store_hash)
    logger.debug(f"presampled {suite}")
    return suite


def make_icl_suite(store: ExemplarStore, task: EvalTask, count: int, seed: int, pairs: int = 8) -> Suite:
    return presample_suite(lambda r: build_icl_eval(store, task, r, pairs), count, seed,
                           name=task.name, k_way=task.k_way, n_shot=task.n_shot, store_hash=store.digest())


def make_iwl_suite(store: ExemplarStore, count: int, seed: int, pairs: int = 8) -> Suite:
    return presample_suite(lambda r: build_iwl_eval(store, r, pairs), count, seed,
                           name="iwl", store_hash=store.digest())


def resolve_batch(store: ExemplarStore, episodes: Sequence[Episode]):
    """
    Resolve references into arrays.

    Returns:
        (exemplars [B, L+1, *shape] with the query last, labels [B, L], targets [B])
    """
    if not episodes:
        raise ParameterError("empty episode batch")
    pairs = episodes[0].pairs
    refs, labels = [], []
    for ep in episodes:
        if ep.pairs != pairs:
            raise ParameterError("episodes in one batch must share L")
        refs += ep.context_refs + [ep.query]
        labels.append(ep.context_labels)
    exemplars = store.gather(refs).reshape(len(episodes), pairs + 1, *store.shape)
    return (exemplars,
            np.asarray(labels, dtype=np.int64).reshape(len(episodes), pairs),
            np.asarray([ep.target for ep in episodes], dtype=np.int64))


# =========================================================
# SUITE FILES (ICLS)
# =========================================================

def _put_str(w: BinaryWriter, s: str):
    b = s.encode("utf-8")
    w.u16(len(b))
    w.raw(b)


def _get_str(rd: BinaryReader, what: str) -> str:
    n = rd.u16(what + " length")
    at = rd.offset
    try:
        return rd.raw(n, what).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{rd.label}: {what} is not UTF-8", offset=at) from exc


def suite_to_bytes(suite: Suite) -> bytes:
    w = BinaryWriter()
    w.raw(SUITE_MAGIC)
    w.u16(SUITE_VERSION)
    w.u8(1 if suite.store_hash else 0)
    w.raw(bytes.fromhex(suite.store_hash) if suite.store_hash else bytes(32))
    _put_str(w, suite.name)
    w.u8(EPISODE_KINDS.index(suite.kind))
    w.u32(suite.k_way)
    w.u32(suite.n_shot)
    w.u32(suite.pairs)
    w.u64(suite.seed & 0xFFFFFFFFFFFFFFFF)
    w.u32(len(suite.episodes))
    for ep in suite.episodes:
        pv = ep.provenance
        w.u8(EPISODE_KINDS.index(pv.kind))
        w.u8((1 if pv.swapped else 0) | (2 if pv.copies else 0))
        w.u32(pv.query_class & _NONE32)
        w.u32(pv.original_label & _NONE32)
        _put_str(w, pv.recipe)
        for ref, label in ep.context:
            w.u32(ref.class_id)
            w.u32(ref.index)
            w.u32(label)
        w.u32(ep.query.class_id)
        w.u32(ep.query.index)
        w.u32(ep.target)
        w.u16(len(pv.label_remap))
        for cid, label in pv.label_remap:
            w.u32(cid)
            w.u32(label)
    return w.getvalue()


def _signed(v: int) -> int:
    return -1 if v == _NONE32 else v


def suite_from_bytes(data: bytes, label: str = "suite") -> Suite:
    rd = BinaryReader(data, label)
    rd.expect_magic(SUITE_MAGIC)
    at = rd.offset
    version = rd.u16("version")
    if version != SUITE_VERSION:
        raise FormatError(f"{label}: unsupported suite version {version}", offset=at)
    has_hash = rd.u8("hash flag")
    digest = rd.raw(32, "store hash").hex()
    name = _get_str(rd, "name")

    def kind_at():
        at = rd.offset
        code = rd.u8("kind")
        if code >= len(EPISODE_KINDS):
            raise FormatError(f"{label}: unknown episode kind {code}", offset=at)
        return EPISODE_KINDS[code]

    kind = kind_at()
    k_way, n_shot, pairs = rd.u32("k"), rd.u32("n"), rd.u32("pairs")
    seed = rd.u64("seed")
    count = rd.u32("episode count")
    episodes = []
    for _ in range(count):
        ep_kind = kind_at()
        flags = rd.u8("flags")
        q_class = _signed(rd.u32("query class"))
        original = _signed(rd.u32("original label"))
        recipe = _get_str(rd, "recipe")
        context = tuple((ExemplarRef(rd.u32("class"), rd.u32("index")), rd.u32("label")) for _ in range(pairs))
        query = ExemplarRef(rd.u32("query class"), rd.u32("query index"))
        target = rd.u32("target")
        remap = tuple((rd.u32("remap class"), rd.u32("remap label")) for _ in range(rd.u16("remap count")))
        prov = Provenance(kind=ep_kind, recipe=recipe, query_class=q_class, swapped=bool(flags & 1),
                          original_label=original, copies=bool(flags & 2), label_remap=remap)
        episodes.append(Episode(context, query, target, prov))
    rd.done()
    return Suite(name=name, kind=kind, episodes=tuple(episodes), seed=seed, k_way=k_way, n_shot=n_shot,
                 store_hash=digest if has_hash else None)


def suite_hash(suite: Suite) -> str:
    return sha256_bytes(suite_to_bytes(suite))


def save_suite(suite: Suite, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(suite_to_bytes(suite))
    os.replace(tmp, path)
    return path


def check_suite_against_store(suite: Suite, store: ExemplarStore):
    """Raise if the suite was built on another store or references missing exemplars."""
    if suite.store_hash and suite.store_hash != store.digest():
        raise HashMismatchError(f"suite {suite.name} was built on store {suite.store_hash[:12]}, "
                                f"got {store.digest()[:12]}")
    for ep in suite.episodes:
        for ref in ep.context_refs + [ep.query]:
            if not store.has_class(ref.class_id) or ref.index >= len(store.record(ref.class_id)):
                raise FormatError(f"suite {suite.name}: reference {ref} does not resolve in the store")


def load_suite(path: Union[str, Path], store: Optional[ExemplarStore] = None) -> Suite:
    path = Path(path)
    suite = suite_from_bytes(path.read_bytes(), label=str(path))
    if store is not None:
        check_suite_against_store(suite, store)
    return suite
