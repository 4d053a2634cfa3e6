"""Exception types shared across the package.

Each exception corresponds to a named failure mode of the public API.
Conditions that are reported-but-not-fatal (ill conditioning, optimizer
non-convergence) are flags on result objects, not exceptions.
"""


class CarnotJetError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(CarnotJetError):
    """Point or vector length does not match the ambient group dimension."""


class SpecMismatch(CarnotJetError):
    """Operands live over different variable spaces or mix exact/float coefficients."""


class JacobiViolation(CarnotJetError):
    """Structure constants fail the Jacobi identity."""


class GradingViolation(CarnotJetError):
    """Structure constants have an entry outside the layer grading."""


class NonGenerating(CarnotJetError):
    """Brackets of the first layer fail to span the next layer."""


class BracketMismatch(CarnotJetError):
    """Derived vector fields do not reproduce the input structure constants."""


class SingularSystem(CarnotJetError):
    """A linear system that should be unit-triangular turned out singular."""


class IncompleteJet(CarnotJetError):
    """A jet is missing values for some multi-index or base point."""


class CoincidentPoints(CarnotJetError):
    """Two distinct inputs coincide where a positive distance is required."""


class DegreeTooHigh(CarnotJetError):
    """Polynomial degree exceeds the order supported by the operation."""


class EmptySet(CarnotJetError):
    """A set sample with no member cells was supplied."""


class MetricUnsupported(CarnotJetError):
    """The requested operation needs a geodesic-capable metric."""


class StencilOutOfDomain(CarnotJetError):
    """A finite-difference stencil leaves the sampled domain."""


class RadiusUnderResolved(CarnotJetError):
    """A ball radius is too small for the grid resolution."""


class TooFewSamples(CarnotJetError):
    """Not enough masked samples to determine a fit."""


class CoverageShortfall(CarnotJetError):
    """No closed set of the requested measure deficit exists.

    Carries ``achievable`` (the smallest deficit that would succeed).
    """

    def __init__(self, message, achievable=None):
        super().__init__(message)
        self.achievable = achievable


class EmptyF(CarnotJetError):
    """The selected closed set is empty."""


class InfiniteM(CarnotJetError):
    """No finite Lipschitz-type constant exists for the given jet."""


class UnknownSuite(CarnotJetError):
    """Verification suite name not recognized."""


class BadParams(CarnotJetError):
    """Invalid parameters for a synthetic dataset generator."""


class GroupFileError(CarnotJetError):
    """A group specification file failed to parse; carries a line number."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
