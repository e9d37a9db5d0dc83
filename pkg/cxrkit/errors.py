"""Exception hierarchy for cxrkit.

Every failure the pipeline reports on purpose derives from ``CxrKitError`` so the CLI
can map it to an exit code without catching unrelated bugs.
"""


class CxrKitError(Exception):
    """Base class for all cxrkit errors"""


class ConfigError(CxrKitError):
    """Run configuration is missing, unreadable or invalid"""


# ============ imaging / denoise ============

class ImageReadError(CxrKitError):
    """An image file could not be decoded"""


class ImageWriteError(CxrKitError, OSError):
    """An image or overlay file could not be written"""


class AllMaskedError(CxrKitError):
    """Inpainting needs at least one unmasked pixel"""


class ZeroDimensionError(CxrKitError, ValueError):
    """Requested output size is not positive"""


class NonPositiveUError(CxrKitError, ValueError):
    """The log-fidelity energy is undefined for u <= 0"""


class DivergedError(CxrKitError):
    """Gradient descent kept increasing the energy"""


# ============ dataset / imbalance ============

class DuplicatePathError(CxrKitError):
    """The same image path appears in more than one record"""


class CountMismatchError(CxrKitError):
    """Split counts do not add up to the class size"""


class TooFewSamplesError(CxrKitError):
    """A class has fewer members than requested folds"""


class EmptyClassError(CxrKitError):
    """A class has no samples"""


class TargetBelowCurrentError(CxrKitError):
    """Oversampling target is smaller than the existing class count"""


# ============ model ============

class ShapeMismatchError(CxrKitError, ValueError):
    """Array shape does not match what the network expects"""


class EmptyManifestError(CxrKitError):
    """Training or validation data is empty"""


class UnknownLayerError(CxrKitError, KeyError):
    """A layer selector matched no layer"""


class CheckpointError(CxrKitError, OSError):
    """Checkpoint could not be read or written"""


class FormatVersionMismatchError(CheckpointError):
    """Checkpoint header is malformed or from another format version"""


# ============ metrics / explain / cli ============

class NonFiniteError(CxrKitError, ValueError):
    """Input contains NaN or infinity"""


class InvalidTargetError(CxrKitError, ValueError):
    """Targets are not one-hot rows or weights are not positive"""


class LabelOutOfRangeError(CxrKitError, ValueError):
    """Label index outside 0..num_classes-1"""


class DegenerateClassError(CxrKitError):
    """ROC AUC needs at least one positive and one negative"""


class TooFewPerturbationsError(CxrKitError, ValueError):
    """LIME needs more perturbations than segments"""


class MissingRunError(CxrKitError):
    """A run directory has no evaluation report"""
