"""
Exemplar store: class-indexed fixed-shape exemplars with split tags.

Stores are immutable once built. Every transformation (holdout split,
instance relabelling, sample budgets) returns a new store. The EXB1 binary
format is the on-disk form and also what the content hash is taken over.
"""
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models.config import SyntheticSpec, ZipfSpec
from src.models.episode import ExemplarRef
from src.utils.binio import BinaryReader, BinaryWriter
from src.utils.errors import FormatError, SpecError, SplitError
from src.utils.hashing import sha256_bytes
from src.utils.logging_utils import get_logger
from src.utils.rng import RngStream

logger = get_logger(__name__)

MAGIC = b"EXB1"
KIND_RASTER = "raster"
KIND_VECTOR = "vector"
_KIND_CODES = {KIND_RASTER: 0, KIND_VECTOR: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

SPLIT_TRAIN = 0
SPLIT_VALIDATION = 1

SYNTH_STREAM = 0x5EED
SPLIT_STREAM = 0x5711


@dataclass(frozen=True)
class ClassRecord:
    """One class: its exemplars, per-exemplar split tags and novel flag."""
    class_id: int
    exemplars: np.ndarray
    split: np.ndarray
    novel: bool = False

    def __len__(self) -> int:
        return len(self.exemplars)


class ExemplarStore:
    """
    Immutable class-indexed exemplar collection.

    Base (non-novel) classes carry training labels 0..n_base-1 assigned by
    ascending class id.
    """

    def __init__(self, kind: str, shape: Sequence[int], classes: Iterable[ClassRecord]):
        if kind not in _KIND_CODES:
            raise SpecError(f"unknown exemplar kind {kind!r}")
        self.kind = kind
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != (2 if kind == KIND_RASTER else 1) or min(self.shape) < 1:
            raise SpecError(f"bad {kind} shape {self.shape}")
        dtype = np.uint8 if kind == KIND_RASTER else np.float32
        records = sorted(classes, key=lambda r: r.class_id)
        self._by_id: Dict[int, ClassRecord] = {}
        for r in records:
            if r.class_id in self._by_id:
                raise SpecError(f"duplicate class id {r.class_id}")
            if r.exemplars.dtype != dtype or tuple(r.exemplars.shape[1:]) != self.shape:
                raise SpecError(f"class {r.class_id}: exemplars {r.exemplars.dtype}{r.exemplars.shape} "
                                f"do not match {kind} {self.shape}")
            if r.split.shape != (len(r.exemplars),):
                raise SpecError(f"class {r.class_id}: split tags do not cover its exemplars")
            r.exemplars.setflags(write=False)
            r.split.setflags(write=False)
            self._by_id[r.class_id] = r
        self.classes: Tuple[ClassRecord, ...] = tuple(records)
        self.base_class_ids: Tuple[int, ...] = tuple(r.class_id for r in records if not r.novel)
        self.novel_class_ids: Tuple[int, ...] = tuple(r.class_id for r in records if r.novel)
        self._label = {cid: i for i, cid in enumerate(self.base_class_ids)}
        self._train = {r.class_id: np.flatnonzero(r.split == SPLIT_TRAIN) for r in records}
        self._valid = {r.class_id: np.flatnonzero(r.split == SPLIT_VALIDATION) for r in records}
        self._train_counts = np.array([len(self._train[c]) for c in self.base_class_ids], dtype=np.int64)
        self._valid_counts = np.array([len(self._valid[c]) for c in self.base_class_ids], dtype=np.int64)
        self._train_counts.setflags(write=False)
        self._valid_counts.setflags(write=False)
        self._hash: Optional[str] = None

    # ---- lookups ----

    @property
    def n_base(self) -> int:
        return len(self.base_class_ids)

    @property
    def n_novel(self) -> int:
        return len(self.novel_class_ids)

    @property
    def n_exemplars(self) -> int:
        return sum(len(r) for r in self.classes)

    def record(self, class_id: int) -> ClassRecord:
        return self._by_id[class_id]

    def has_class(self, class_id: int) -> bool:
        return class_id in self._by_id

    def label_of(self, class_id: int) -> int:
        return self._label[class_id]

    def class_of_label(self, label: int) -> int:
        return self.base_class_ids[label]

    def train_indices(self, class_id: int) -> np.ndarray:
        return self._train[class_id]

    def validation_indices(self, class_id: int) -> np.ndarray:
        return self._valid[class_id]

    def train_counts(self) -> np.ndarray:
        """Train-tagged exemplar count per base class, in base-class order."""
        return self._train_counts

    def validation_counts(self) -> np.ndarray:
        return self._valid_counts

    def exemplar(self, ref: ExemplarRef) -> np.ndarray:
        return self._by_id[ref.class_id].exemplars[ref.index]

    def gather(self, refs: Sequence[ExemplarRef]) -> np.ndarray:
        return np.stack([self.exemplar(r) for r in refs])

    # ---- serialization ----

    def to_bytes(self) -> bytes:
        w = BinaryWriter()
        w.raw(MAGIC)
        w.u8(_KIND_CODES[self.kind])
        for extent in self.shape:
            w.u32(extent)
        w.u32(len(self.classes))
        payload_dtype = "<u1" if self.kind == KIND_RASTER else "<f4"
        for r in self.classes:
            w.u32(r.class_id)
            w.u32(len(r))
            w.u8(1 if r.novel else 0)
            for tag, ex in zip(r.split, r.exemplars):
                w.u8(int(tag))
                w.array(ex, payload_dtype)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, label: str = "store") -> "ExemplarStore":
        rd = BinaryReader(data, label)
        rd.expect_magic(MAGIC)
        at = rd.offset
        code = rd.u8("kind")
        if code not in _KIND_NAMES:
            raise FormatError(f"{label}: unknown kind byte {code}", offset=at)
        kind = _KIND_NAMES[code]
        shape = (rd.u32("height"), rd.u32("width")) if kind == KIND_RASTER else (rd.u32("dim"),)
        if min(shape) < 1:
            raise FormatError(f"{label}: zero extent in shape {shape}", offset=rd.offset - 4)
        size = int(np.prod(shape))
        dtype = np.uint8 if kind == KIND_RASTER else np.float32
        n_classes = rd.u32("class count")
        records, seen = [], set()
        for _ in range(n_classes):
            at = rd.offset
            cid = rd.u32("class id")
            if cid in seen:
                raise FormatError(f"{label}: duplicate class id {cid}", offset=at)
            seen.add(cid)
            count = rd.u32("exemplar count")
            novel = rd.u8("novel flag")
            if count * (1 + size * np.dtype(dtype).itemsize) > rd.remaining():
                raise FormatError(f"{label}: truncated payload for class {cid} ({count} exemplars)",
                                  offset=rd.offset)
            tags = np.empty(count, dtype=np.uint8)
            ex = np.empty((count, size), dtype=dtype)
            for i in range(count):
                at = rd.offset
                tags[i] = rd.u8("split tag")
                if tags[i] > SPLIT_VALIDATION:
                    raise FormatError(f"{label}: bad split tag {tags[i]}", offset=at)
                ex[i] = rd.array(dtype, size, "exemplar payload")
            records.append(ClassRecord(cid, ex.reshape(count, *shape), tags, bool(novel)))
        rd.done()
        return cls(kind, shape, records)

    def digest(self) -> str:
        """SHA-256 of the EXB1 encoding."""
        if self._hash is None:
            self._hash = sha256_bytes(self.to_bytes())
        return self._hash

    def summary(self) -> Dict[str, Union[int, str]]:
        return {
            "classes": len(self.classes),
            "base_classes": self.n_base,
            "novel_classes": self.n_novel,
            "exemplars": self.n_exemplars,
            "kind": self.kind,
            "shape": "x".join(str(s) for s in self.shape),
            "hash": self.digest(),
        }

    def __str__(self) -> str:
        return (f"ExemplarStore({self.kind} {self.shape}, {self.n_base} base + "
                f"{self.n_novel} novel classes, {self.n_exemplars} exemplars)")


def store_hash(store: ExemplarStore) -> str:
    return store.digest()


def save_store(store: ExemplarStore, path: Union[str, Path]) -> Path:
    """Write EXB1 atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(store.to_bytes())
    os.replace(tmp, path)
    logger.info(f"💾 Saved {store} to {path}")
    return path


def load_store(path: Union[str, Path]) -> ExemplarStore:
    path = Path(path)
    store = ExemplarStore.from_bytes(path.read_bytes(), label=str(path))
    logger.debug(f"loaded {store} from {path}")
    return store


# =========================================================
# SYNTHETIC GENERATION
# =========================================================

def _render_strokes(strokes: np.ndarray, height: int, width: int) -> np.ndarray:
    """Rasterize line segments [S, 2, 2] in unit coordinates to bytes."""
    ys, xs = np.mgrid[0:height, 0:width]
    pix = np.stack([(xs + 0.5) / width, (ys + 0.5) / height], axis=-1)  # [H, W, 2]
    scale = float(max(height, width))
    img = np.zeros((height, width), dtype=np.float64)
    for a, b in strokes:
        ab = b - a
        t = np.clip(((pix - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
        nearest = a + t[..., None] * ab
        dist = np.linalg.norm(pix - nearest, axis=-1) * scale
        img = np.maximum(img, np.clip(1.5 - dist, 0.0, 1.0))
    return np.round(img * 255).astype(np.uint8)


def gen_synthetic_store(spec: SyntheticSpec) -> ExemplarStore:
    """
    Deterministic synthetic store.

    gaussian-prototype: unit-norm prototype per class plus isotropic noise.
    procedural-glyph: per-class random strokes, endpoints jittered per exemplar.
    """
    if spec.n_classes < 2:
        raise SpecError(f"n_classes must be >= 2, got {spec.n_classes}")
    if spec.n_exemplars < 1:
        raise SpecError(f"n_exemplars must be >= 1, got {spec.n_exemplars}")
    if spec.noise < 0:
        raise SpecError(f"noise scale must be >= 0, got {spec.noise}")
    root = RngStream(spec.seed, SYNTH_STREAM)
    records = []
    if spec.kind == "gaussian-prototype":
        if spec.vector_dim < 2:
            raise SpecError(f"vector_dim must be >= 2, got {spec.vector_dim}")
        for c in range(spec.n_classes):
            rng = root.child(c)
            proto = rng.normal(size=spec.vector_dim)
            proto /= np.linalg.norm(proto)
            ex = proto + spec.noise * rng.normal(size=(spec.n_exemplars, spec.vector_dim))
            records.append(ClassRecord(c, ex.astype(np.float32), np.zeros(spec.n_exemplars, np.uint8)))
        store = ExemplarStore(KIND_VECTOR, (spec.vector_dim,), records)
    else:
        h, w = spec.raster_size
        if min(h, w) < 4:
            raise SpecError(f"raster_size must be at least 4x4, got {spec.raster_size}")
        for c in range(spec.n_classes):
            rng = root.child(c)
            n_strokes = int(rng.integers(2, 5))
            base = rng.random(size=(n_strokes, 2, 2)) * 0.7 + 0.15
            ex = np.empty((spec.n_exemplars, h, w), dtype=np.uint8)
            for i in range(spec.n_exemplars):
                jitter = spec.noise * rng.normal(size=base.shape)
                ex[i] = _render_strokes(np.clip(base + jitter, 0.0, 1.0), h, w)
            records.append(ClassRecord(c, ex, np.zeros(spec.n_exemplars, np.uint8)))
        store = ExemplarStore(KIND_RASTER, (h, w), records)
    logger.info(f"✅ Generated {store}")
    return store


# =========================================================
# SPLITS AND CLASS STRUCTURE
# =========================================================

def split_holdout(store: ExemplarStore, n_novel: int, per_class_split: Tuple[int, int] = (18, 2),
                  seed: int = 42) -> ExemplarStore:
    """
    Choose n_novel classes as novel and tag base exemplars train/validation.

    Each base class gets exactly ``validation`` exemplars tagged validation at
    random; the rest (at least ``train``) stay train.
    """
    ids = [r.class_id for r in store.classes]
    if not 0 <= n_novel < len(ids):
        raise SplitError(f"n_novel={n_novel} must be below the class count {len(ids)}")
    n_train, n_valid = per_class_split
    if n_train < 1 or n_valid < 0:
        raise SplitError(f"bad per-class split {per_class_split}")
    root = RngStream(seed, SPLIT_STREAM)
    novel = set(int(c) for c in root.choice(np.array(ids), size=n_novel, replace=False)) if n_novel else set()
    records = []
    for r in store.classes:
        n = len(r)
        if r.class_id in novel:
            records.append(ClassRecord(r.class_id, r.exemplars, np.zeros(n, np.uint8), True))
            continue
        if n < n_train + n_valid:
            raise SplitError(f"class {r.class_id} has {n} exemplars, split {per_class_split} needs "
                             f"{n_train + n_valid}")
        tags = np.zeros(n, np.uint8)
        if n_valid:
            tags[root.child(r.class_id).choice(n, size=n_valid, replace=False)] = SPLIT_VALIDATION
        records.append(ClassRecord(r.class_id, r.exemplars, tags, False))
    out = ExemplarStore(store.kind, store.shape, records)
    logger.info(f"split {len(ids)} classes into {out.n_base} base / {out.n_novel} novel")
    return out


def restrict_base_classes(store: ExemplarStore, n_classes: int) -> ExemplarStore:
    """Keep the first n_classes base classes by id; novel classes untouched."""
    if n_classes > store.n_base:
        raise SplitError(f"requested {n_classes} base classes, store has {store.n_base}")
    keep = set(store.base_class_ids[:n_classes]) | set(store.novel_class_ids)
    return ExemplarStore(store.kind, store.shape, [r for r in store.classes if r.class_id in keep])


def class_sampler(store: ExemplarStore, zipf: Union[ZipfSpec, float, None] = None) -> np.ndarray:
    """
    Probability of each base class (in base-class order).

    p(rank k) ∝ k^(-coefficient), ranks by ascending class id.
    """
    a = zipf.coefficient if isinstance(zipf, ZipfSpec) else float(zipf or 0.0)
    ranks = np.arange(1, store.n_base + 1, dtype=np.float64)
    weights = ranks ** (-a)
    return weights / weights.sum()


def instance_relabel(store: ExemplarStore) -> ExemplarStore:
    """
    Every train exemplar of a base class becomes its own singleton class.

    New ids start above the largest existing id. Validation exemplars have no
    class left to belong to and are dropped; novel classes are untouched.
    """
    next_id = max(r.class_id for r in store.classes) + 1
    records = [r for r in store.classes if r.novel]
    for cid in store.base_class_ids:
        r = store.record(cid)
        for i in store.train_indices(cid):
            records.append(ClassRecord(next_id, r.exemplars[i:i + 1].copy(), np.zeros(1, np.uint8)))
            next_id += 1
    out = ExemplarStore(store.kind, store.shape, records)
    logger.info(f"instance relabel: {store.n_base} classes -> {out.n_base} singleton classes")
    return out


def budget_counts(available: np.ndarray, budget: int, coefficient: float) -> np.ndarray:
    """
    Per-class train counts summing to the budget under a Zipf profile.

    Counts are budget * p(rank) rounded half-up and capped by availability.
    A surplus is removed one exemplar at a time from the tail rank upwards; a
    deficit is filled from the head rank downwards.
    """
    available = np.asarray(available, dtype=np.int64)
    if budget > available.sum():
        raise SplitError(f"sample budget {budget} exceeds the {int(available.sum())} available train exemplars")
    ranks = np.arange(1, len(available) + 1, dtype=np.float64)
    p = ranks ** (-coefficient)
    p /= p.sum()
    counts = np.minimum(np.floor(budget * p + 0.5).astype(np.int64), available)
    surplus = int(counts.sum()) - budget
    i = len(counts) - 1
    while surplus > 0:
        if counts[i] > 0:
            counts[i] -= 1
            surplus -= 1
        i = i - 1 if i > 0 else len(counts) - 1
    deficit = budget - int(counts.sum())
    i = 0
    while deficit > 0:
        take = min(int(available[i] - counts[i]), deficit)
        counts[i] += take
        deficit -= take
        i += 1
    return counts


def apply_sample_budget(store: ExemplarStore, budget: int, zipf: Union[ZipfSpec, float] = 1.0) -> ExemplarStore:
    """
    Keep a fixed total of train exemplars, distributed over base classes by Zipf rank.

    Classes left with zero train exemplars are dropped. Validation exemplars of
    kept classes are kept.
    """
    a = zipf.coefficient if isinstance(zipf, ZipfSpec) else float(zipf)
    counts = budget_counts(store.train_counts(), budget, a)
    records = [r for r in store.classes if r.novel]
    for cid, n in zip(store.base_class_ids, counts):
        if n == 0:
            continue
        r = store.record(cid)
        keep = np.sort(np.concatenate([store.train_indices(cid)[:n], store.validation_indices(cid)]))
        records.append(ClassRecord(cid, r.exemplars[keep].copy(), r.split[keep].copy(), False))
    out = ExemplarStore(store.kind, store.shape, records)
    logger.info(f"sample budget {budget} (zipf {a}): {out.n_base} base classes kept")
    return out


# =========================================================
# P5 (binary portable graymap) IMPORT
# =========================================================

def _pgm_header(data: bytes, label: str) -> Tuple[int, int, int, int]:
    """Parse 'P5 <w> <h> <maxval>' and return (width, height, maxval, data offset)."""
    if data[:2] != b"P5":
        raise FormatError(f"{label}: not a binary PGM (P5) file", offset=0)
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{label}: malformed PGM header", offset=start)
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{label}: malformed PGM header", offset=pos)
    width, height, maxval = fields
    if not 0 < maxval < 256:
        raise FormatError(f"{label}: only 8-bit PGM is supported (maxval {maxval})", offset=pos)
    return width, height, maxval, pos + 1


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    """Read an 8-bit P5 graymap as an [H, W] uint8 array."""
    data = Path(path).read_bytes()
    width, height, maxval, start = _pgm_header(data, str(path))
    rd = BinaryReader(data, str(path))
    rd.offset = start
    pixels = rd.array(np.uint8, width * height, "pixels").reshape(height, width)
    if maxval != 255:
        pixels = np.round(pixels.astype(np.float64) * 255.0 / maxval).astype(np.uint8)
    return pixels


def write_pgm(path: Union[str, Path], image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.tobytes())


def import_pgm_dir(path: Union[str, Path]) -> ExemplarStore:
    """
    Build a raster store from one subdirectory per class of .pgm files.

    Classes get ids 0.. in sorted directory-name order; all exemplars are
    tagged train and no class is novel until split_holdout runs.
    """
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    records: List[ClassRecord] = []
    shape = None
    for cid, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.pgm"))
        if not files:
            raise FormatError(f"{cdir}: no .pgm files")
        images = []
        for f in files:
            img = read_pgm(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise FormatError(f"{f}: raster {img.shape} differs from {shape}")
            images.append(img)
        records.append(ClassRecord(cid, np.stack(images), np.zeros(len(images), np.uint8)))
    if not records:
        raise FormatError(f"{root}: no class subdirectories")
    store = ExemplarStore(KIND_RASTER, shape, records)
    logger.info(f"📥 Imported {store} from {root}")
    return store
