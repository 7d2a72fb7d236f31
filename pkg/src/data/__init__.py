"""
ICL Forge - Data module.
Contains predefined experiment profiles and recipe presets.
"""
from src.data.profiles import (
    ProfileDefinition,
    get_all_profiles,
    get_profile_by_id,
    get_profiles_summary,
    get_recipe_preset,
    PROFILE_ALIASES,
    PROFILES,
    RECIPE_PRESETS
)

__all__ = [
    "ProfileDefinition",
    "get_all_profiles",
    "get_profile_by_id",
    "get_profiles_summary",
    "get_recipe_preset",
    "PROFILE_ALIASES",
    "PROFILES",
    "RECIPE_PRESETS"
]
