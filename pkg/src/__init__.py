"""ICL Forge - Core Package"""
