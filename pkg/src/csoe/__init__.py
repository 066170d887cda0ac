"""Compressed-sensing output encoding for small-object localization."""

from .errors import (ConfigError, CsoeError, DomainError, GenerationError, NumericError, ParseError,
                     SingularSupportError, UsageError)
from .radon import PointSet, Sinogram, decode_sinogram, extract_peaks, fbp_inverse, radon_forward
from .sensing import SensingMatrix, encode, make_sensing_matrix, required_measurements

__version__ = "0.1.0"
