"""Data models for episodes: exemplar references, provenance and frozen suites."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

KIND_STANDARD = "standard"
KIND_BURSTY = "bursty"
KIND_ICL = "icl"
KIND_IWL = "iwl"
EPISODE_KINDS = (KIND_STANDARD, KIND_BURSTY, KIND_ICL, KIND_IWL)


@dataclass(frozen=True, order=True)
class ExemplarRef:
    """Points at one exemplar of one class inside an ExemplarStore."""
    class_id: int
    index: int

    def __str__(self) -> str:
        return f"{self.class_id}:{self.index}"


@dataclass(frozen=True)
class Provenance:
    """
    How an episode was built.

    ``query_class`` is the store class of the query exemplar. ``original_label``
    is set when a label swap replaced the query label. ``label_remap`` maps
    store class ids to the labels used inside the episode (evaluation only).
    """
    kind: str = KIND_STANDARD
    recipe: str = ""
    query_class: int = -1
    swapped: bool = False
    original_label: int = -1
    copies: bool = False
    label_remap: Tuple[Tuple[int, int], ...] = ()

    @property
    def remap(self) -> Dict[int, int]:
        return dict(self.label_remap)


@dataclass(frozen=True)
class Episode:
    """
    One sequence: L context (exemplar, label) pairs followed by a query.
    """
    context: Tuple[Tuple[ExemplarRef, int], ...]
    query: ExemplarRef
    target: int
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def pairs(self) -> int:
        return len(self.context)

    @property
    def context_refs(self) -> List[ExemplarRef]:
        return [ref for ref, _ in self.context]

    @property
    def context_labels(self) -> List[int]:
        return [label for _, label in self.context]

    def query_class_positions(self) -> List[int]:
        """Context indices whose exemplar belongs to the query's class."""
        qc = self.query.class_id
        return [i for i, (ref, _) in enumerate(self.context) if ref.class_id == qc]

    def __str__(self) -> str:
        return (f"Episode({self.provenance.kind}, L={self.pairs}, "
                f"query={self.query}, target={self.target})")


@dataclass(frozen=True)
class Suite:
    """
    A frozen, presampled list of episodes reused across checkpoints.

    ``store_hash`` ties the suite to the EXB1 store its references resolve in.
    """
    name: str
    kind: str
    episodes: Tuple[Episode, ...]
    seed: int
    k_way: int = 0
    n_shot: int = 0
    store_hash: Optional[str] = None

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)

    @property
    def pairs(self) -> int:
        return self.episodes[0].pairs if self.episodes else 0

    def __str__(self) -> str:
        return f"Suite {self.name}: {len(self.episodes)} {self.kind} episodes"
