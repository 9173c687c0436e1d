"""
Fiber segmentation toolkit

Synthetic CT phantoms of short-fiber reinforced polymers, classical baselines,
a small autodiff engine with residual segmentation networks, and Dice evaluation.
"""
__version__ = "0.1.0"
