"""Error types raised across the package.

Every failure mode carries a stable string ``code`` so the command line
front end and the JSON manifests can report it without parsing messages.
"""


class ConoscatterError(Exception):
    """Base class. ``code`` identifies the failure mode."""

    code = "ERROR"

    def __init__(self, message="", **info):
        super().__init__(message or self.code)
        self.info = info


def _make(name, code, base=ConoscatterError, doc=None):
    cls = type(name, (base,), {"code": code, "__doc__": doc or code})
    return cls


class GeometryError(ConoscatterError):
    code = "GEOMETRY"


GradientDegenerate = _make("GradientDegenerate", "GRADIENT_DEGENERATE", GeometryError,
                           "Defining-function gradients are (nearly) dependent.")
TangentialRay = _make("TangentialRay", "TANGENTIAL_RAY", GeometryError,
                      "Incident direction is (nearly) orthogonal to the conormal covector.")
ZeroSection = _make("ZeroSection", "ZERO_SECTION", GeometryError,
                    "A cotangent vector vanished.")
RankDeficientParams = _make("RankDeficientParams", "RANK_DEFICIENT_PARAMS", GeometryError,
                            "Parameters lie on the singular set of a parametrization.")
NotIntersecting = _make("NotIntersecting", "NOT_INTERSECTING", GeometryError,
                        "Two chart points that should coincide do not.")
DegenerateSample = _make("DegenerateSample", "DEGENERATE_SAMPLE", GeometryError,
                         "Sample sits on an excluded exceptional set.")
SigmaZero = _make("SigmaZero", "SIGMA_ZERO", GeometryError, "Fiber variable sigma is zero.")


class PotentialError(ConoscatterError):
    code = "POTENTIAL"


OrderInadmissible = _make("OrderInadmissible", "ORDER_INADMISSIBLE", PotentialError,
                          "Orders (M1, M2) fall outside the admissible window.")
Unresolved = _make("Unresolved", "UNRESOLVED", PotentialError,
                   "Mollification scale is below two grid cells.")
FitUnstable = _make("FitUnstable", "FIT_UNSTABLE", ConoscatterError,
                    "A log-log fit has a residual above tolerance.")
BandLimited = _make("BandLimited", "BAND_LIMITED", PotentialError,
                    "Requested fit range exceeds the band limit.")


class WavefieldError(ConoscatterError):
    code = "WAVEFIELD"


ReceiverInsideSupport = _make("ReceiverInsideSupport", "RECEIVER_INSIDE_SUPPORT", WavefieldError,
                              "Receiver is within 2 pulse widths of the potential support.")
QuadratureUnderresolved = _make("QuadratureUnderresolved", "QUADRATURE_UNDERRESOLVED",
                                WavefieldError, "Active shell thinner than two grid cells.")
VolumeGridMissing = _make("VolumeGridMissing", "VOLUME_GRID_MISSING", WavefieldError,
                          "A volumetric first-order field is required.")


class ScatterError(ConoscatterError):
    code = "SCATTER"


SGridTooCoarse = _make("SGridTooCoarse", "S_GRID_TOO_COARSE", ScatterError,
                       "Pulse width is below four s-grid cells.")
T0TooSmall = _make("T0TooSmall", "T0_TOO_SMALL", ScatterError,
                   "Time slice is too early for the echo to have escaped.")
FarfieldUnconverged = _make("FarfieldUnconverged", "FARFIELD_UNCONVERGED", ScatterError,
                            "Doubling the far-field radius changed the kernel too much.")


class SliceInvalid(ScatterError):
    """A data slice failed one of the three validity conditions.

    ``condition`` is 1 (outgoing equals incident somewhere), 2 (normalized
    difference map not a bijection on the grid) or 3 (tangency against the
    Gauss image).
    """

    code = "SLICE_INVALID"

    def __init__(self, condition, message=""):
        super().__init__(message or f"slice invalid: condition {condition}", condition=condition)
        self.condition = condition


class ReconstructError(ConoscatterError):
    code = "RECONSTRUCT"


GradientUndefined = _make("GradientUndefined", "GRADIENT_UNDEFINED", ReconstructError,
                          "Not enough neighbouring echoes to form a gradient.")
CalibrationAmbiguous = _make("CalibrationAmbiguous", "CALIBRATION_AMBIGUOUS", ReconstructError,
                             "Both gradient constants reconstruct equally well.")
BandTooNarrow = _make("BandTooNarrow", "BAND_TOO_NARROW", ReconstructError,
                      "Fit band holds too few frequency samples.")
ClassOverlap = _make("ClassOverlap", "CLASS_OVERLAP", ReconstructError,
                     "Echo classes cannot be separated.")
ReferenceMismatch = _make("ReferenceMismatch", "REFERENCE_MISMATCH", ReconstructError,
                          "Target and reference runs do not share a geometry.")


class ConfigInvalid(ConoscatterError):
    """Malformed configuration; ``field`` names the offending key path."""

    code = "CONFIG_INVALID"

    def __init__(self, field, message=""):
        super().__init__(f"{field}: {message}" if message else field, field=field)
        self.field = field
