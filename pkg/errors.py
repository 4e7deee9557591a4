"""
Exception types for the GEM glass segmentation toolkit
"""

from typing import Any, Dict, List, Optional


class GEMError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(GEMError):
    """Invalid or inconsistent configuration"""


class DimensionError(GEMError, ValueError):
    """Tensor or image dimensions violate a shape contract"""


class InputError(GEMError, ValueError):
    """Input values are unusable (NaN, out of range)"""


class CapacityError(GEMError, ValueError):
    """More items requested than are available"""


class ParameterError(GEMError, ValueError):
    """A numeric parameter is incompatible with the data it is applied to"""


class DataError(GEMError):
    """Missing files, malformed manifests, failed pair validation"""


class LeakageError(DataError):
    """A validation-split mask reached a generation build"""


class WeightLoadError(GEMError):
    """Weight file does not match the model schema"""

    def __init__(self, message: str, offending_keys: Optional[List[str]] = None):
        self.offending_keys = list(offending_keys or [])
        if self.offending_keys:
            message = f"{message}: {', '.join(self.offending_keys)}"
        super().__init__(message)


class NumericError(GEMError):
    """Non-finite values in costs or losses"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class BackendError(GEMError):
    """Generation or embedding backend failed"""


class BackendTimeout(BackendError):
    """Backend did not answer in time"""
