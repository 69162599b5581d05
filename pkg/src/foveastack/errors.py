"""Shared exception types."""


class FoveaError(Exception):
    """Base class for all package errors."""


class OutsideApertureError(FoveaError):
    """Evaluation point lies outside the normalized aperture."""


class DegenerateFitError(FoveaError):
    """Least-squares fit is rank deficient or under-determined."""


class MaterialError(FoveaError):
    """Unknown material or wavelength outside the catalog range."""


class VignettedError(FoveaError):
    """Too few surviving rays to compute a statistic."""


class DivergenceError(FoveaError):
    """Optimization loss exceeded the divergence threshold."""


class ConfigError(FoveaError):
    """Invalid configuration file or missing referenced file."""
