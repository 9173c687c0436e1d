"""
Classical baselines: histogram thresholds, Frangi vesselness, random forest
"""
from src.fiberseg.baselines.forest import (
    ForestConfig,
    TrainedForest,
    forest_predict,
    forest_proba,
    load_forest,
    save_forest,
    train_forest,
)
from src.fiberseg.baselines.frangi import FrangiParams, frangi_segment, frangi_vesselness
from src.fiberseg.baselines.threshold import best_dice_threshold, otsu_threshold

__all__ = [
    "ForestConfig",
    "TrainedForest",
    "forest_predict",
    "forest_proba",
    "load_forest",
    "save_forest",
    "train_forest",
    "FrangiParams",
    "frangi_segment",
    "frangi_vesselness",
    "best_dice_threshold",
    "otsu_threshold",
]
