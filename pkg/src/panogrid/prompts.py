"""Built-in prompt themes, stratified by typical scene scale.

A small fixed list standing in for a full prompt dataset: expansive scenes
that suit panoramas, medium-scale subjects, and dense/small-object scenes
that are known to be harder.
"""

THEMES = (
    # expansive
    "seascape",
    "grassland",
    "landscape",
    "weather",
    "desert",
    "mountain range",
    "night sky",
    "aurora",
    "canyon",
    "wheat field",
    # medium-scale
    "architecture",
    "city skyline",
    "village",
    "harbor",
    "bridge",
    "garden",
    "forest",
    "river",
    "beach",
    "street",
    # dense / small objects
    "crowd",
    "pattern",
    "market",
    "festival",
    "concert",
)
