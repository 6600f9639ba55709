"""Object-goal navigation on synthetic floorplans with adaptive skipping and a sparse/dense predictor."""

__version__ = "0.1.0"
