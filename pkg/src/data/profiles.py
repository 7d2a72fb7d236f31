"""
Predefined experiment profiles and recipe presets.

A profile is a partial experiment config; an experiment file naming
``profile = "<id>"`` is deep-merged over it.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


@dataclass
class ProfileDefinition:
    """A named base configuration."""
    id: str
    description: str
    settings: Dict[str, Any] = field(default_factory=dict)


# =========================================================
# RECIPE PRESETS
# =========================================================

# Values of the "recipe" sweep axis.
RECIPE_PRESETS: Dict[str, Dict[str, Any]] = {
    "standard-only": {"variant": "standard"},
    "bursty": {"variant": "bursty", "query_class_reps": 3},
    "bursty+instCopy": {"variant": "bursty", "query_class_reps": 3, "inst_copy": True},
    "bursty-low": {"variant": "bursty", "query_class_reps": 1},
    "bursty-low+instCopy": {"variant": "bursty", "query_class_reps": 1, "inst_copy": True},
    "bursty-mid": {"variant": "bursty", "query_class_reps": 3, "distractor_format": "3xQ-A-B-C-D-E"},
    "bursty-mid+instCopy": {"variant": "bursty", "query_class_reps": 3,
                            "distractor_format": "3xQ-A-B-C-D-E", "inst_copy": True},
}


def get_recipe_preset(name: str) -> Optional[Dict[str, Any]]:
    return RECIPE_PRESETS.get(name)


# =========================================================
# PROFILES
# =========================================================

_DESK_STORE = {
    "synthetic": {
        "kind": "gaussian-prototype",
        "n_classes": 1623,
        "n_exemplars": 20,
        "vector_dim": 32,
        "noise": 0.1,
        "seed": 7,
    },
    "n_novel": 23,
    "split": [18, 2],
}

_DESK_MODEL = {
    "layers": 3,
    "heads": 1,
    "embed_dim": 64,
    "pairs": 8,
    "embedder": "linear-vector",
    "exemplar_shape": [32],
}

_DESK_TRAIN = {
    "total_steps": 30000,
    "warmup_steps": 1500,
    "max_lr": 6e-4,
    "clip_norm": 1.0,
    "batch_size": 16,
    "eval_every": 1000,
    "seeds": [0, 1, 2],
}


PROFILES: List[ProfileDefinition] = [
    ProfileDefinition(
        id="full-scale",
        description="Full-scale hyperparameters: 12 layers, 8 heads, conv embedder over glyph rasters",
        settings={
            "name": "full-scale",
            "output_dir": "runs/full-scale",
            "store": {
                "synthetic": {
                    "kind": "procedural-glyph",
                    "n_classes": 1623,
                    "n_exemplars": 20,
                    "raster_size": [28, 28],
                    "noise": 0.1,
                    "seed": 7,
                },
                "n_novel": 23,
                "split": [18, 2],
            },
            "model": {
                "layers": 12,
                "heads": 8,
                "embed_dim": 64,
                "pairs": 8,
                "embedder": "conv-raster",
                "exemplar_shape": [28, 28],
            },
            "recipe": RECIPE_PRESETS["bursty"],
            "mix": {"p_bursty": 0.9, "p_label_swap": 0.0},
            "train": {
                "total_steps": 500000,
                "warmup_steps": 15000,
                "max_lr": 6e-4,
                "clip_norm": 1.0,
                "batch_size": 16,
                "eval_every": 5000,
                "seeds": [0, 1, 2],
                "adam_beta1": 0.9,
                "adam_beta2": 0.99,
                "adam_eps": 1e-8,
            },
            "eval": {"tasks": ["2w4s", "4w2s"], "suite_size": 10000},
        },
    ),
    ProfileDefinition(
        id="desk-scale",
        description="Probe model (3 layers, 1 head, d=64) on a 1600-class gaussian store, 30k steps",
        settings={
            "name": "desk-scale",
            "output_dir": "runs/desk-scale",
            "store": _DESK_STORE,
            "model": _DESK_MODEL,
            "recipe": RECIPE_PRESETS["bursty+instCopy"],
            "mix": {"p_bursty": 0.9, "p_label_swap": 0.0},
            "train": _DESK_TRAIN,
            "eval": {"tasks": ["2w4s", "4w2s"], "suite_size": 10000},
            "probe": {"every": 1000, "episodes": 256, "task": "2w4s"},
        },
    ),
    ProfileDefinition(
        id="desk-standard",
        description="desk-scale with standard (non-bursty) sequences only",
        settings={
            "name": "desk-standard",
            "output_dir": "runs/desk-standard",
            "store": _DESK_STORE,
            "model": _DESK_MODEL,
            "recipe": RECIPE_PRESETS["standard-only"],
            "train": _DESK_TRAIN,
            "eval": {"tasks": ["2w4s"], "suite_size": 10000},
            "probe": {"every": 1000, "episodes": 256, "task": "2w4s"},
        },
    ),
    ProfileDefinition(
        id="desk-harder-iwl",
        description="desk-scale bursty (no copies) on 128 base classes; swap-rate and class-count drivers",
        settings={
            "name": "desk-harder-iwl",
            "output_dir": "runs/desk-harder-iwl",
            "store": {**_DESK_STORE, "base_classes": 128},
            "model": _DESK_MODEL,
            "recipe": RECIPE_PRESETS["bursty"],
            "train": _DESK_TRAIN,
            "eval": {"tasks": ["2w4s"], "suite_size": 10000},
        },
    ),
    ProfileDefinition(
        id="smoke",
        description="Seconds-long run for checking an installation",
        settings={
            "name": "smoke",
            "output_dir": "runs/smoke",
            "store": {
                "synthetic": {"kind": "gaussian-prototype", "n_classes": 40, "n_exemplars": 6,
                              "vector_dim": 8, "noise": 0.1, "seed": 7},
                "n_novel": 8,
                "split": [4, 2],
            },
            "model": {"layers": 2, "heads": 2, "embed_dim": 16, "pairs": 8,
                      "embedder": "linear-vector", "exemplar_shape": [8]},
            "recipe": RECIPE_PRESETS["bursty+instCopy"],
            "train": {"total_steps": 20, "warmup_steps": 5, "batch_size": 4, "eval_every": 10, "seeds": [0]},
            "eval": {"tasks": ["2w4s"], "suite_size": 64},
            "probe": {"every": 10, "episodes": 16},
        },
    ),
]


# Alternate ids accepted wherever a profile id is.
PROFILE_ALIASES: Dict[str, str] = {
    "paper-defaults": "full-scale",
}


def get_all_profiles() -> List[ProfileDefinition]:
    """Get all predefined profiles."""
    return PROFILES


def get_profile_by_id(profile_id: str) -> Optional[ProfileDefinition]:
    """Get a profile by id or alias, or None if there is no such profile."""
    profile_id = PROFILE_ALIASES.get(profile_id, profile_id)
    for p in PROFILES:
        if p.id == profile_id:
            return p
    return None


def get_profiles_summary() -> List[Dict[str, Any]]:
    """One line of facts per profile, for listing."""
    aliases: Dict[str, List[str]] = {}
    for alias, target in PROFILE_ALIASES.items():
        aliases.setdefault(target, []).append(alias)
    return [
        {
            "id": p.id,
            "description": p.description,
            "steps": p.settings.get("train", {}).get("total_steps"),
            "layers": p.settings.get("model", {}).get("layers"),
            "aliases": aliases.get(p.id, []),
        }
        for p in PROFILES
    ]
