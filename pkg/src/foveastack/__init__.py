"""Foveated imaging through a deformable phase plate: differentiable
ray tracing, Zernike pattern optimization, stack rendering and fusion,
synthetic device control, and assembly calibration."""

from . import (analysis, calibrate, control, fusion, imaging, materials,
               optics, optimize, zernike)
from .errors import (ConfigError, DegenerateFitError, DivergenceError,
                     FoveaError, MaterialError, OutsideApertureError,
                     VignettedError)
from .optics import OpticalSystem, Ray, build_system, default_system, \
    load_system
from .optimize import OptimizerSchedule, PatternSet
from .zernike import ZernikeExpansion

__version__ = "0.1.0"

__all__ = [
    "analysis", "calibrate", "control", "fusion", "imaging", "materials",
    "optics", "optimize", "zernike",
    "ConfigError", "DegenerateFitError", "DivergenceError", "FoveaError",
    "MaterialError", "OutsideApertureError", "VignettedError",
    "OpticalSystem", "Ray", "build_system", "default_system", "load_system",
    "OptimizerSchedule", "PatternSet", "ZernikeExpansion",
    "__version__",
]
