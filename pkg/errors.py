"""Exception types for the impulse-control toolkit"""


class ImpulseToolkitError(Exception):
    """Base class for every error raised by the toolkit"""


class InvalidCoefficientError(ImpulseToolkitError):
    """A coefficient family evaluated to a non-finite or out-of-range value"""

    def __init__(self, family: str, probe, detail: str = "non-finite value"):
        self.family = family
        self.probe = probe
        super().__init__(f"invalid coefficient '{family}' at {probe}: {detail}")


class DimensionMismatchError(ImpulseToolkitError):
    pass


class SimultaneousImpulsesError(ImpulseToolkitError):
    pass


class ConeViolationError(ImpulseToolkitError):
    pass


class ImpulseOrderError(ImpulseToolkitError):
    """Impulse times outside [t, T] or a perturbation that breaks the ordering"""


class DivergenceError(ImpulseToolkitError):
    def __init__(self, node: int, detail: str = ""):
        self.node = node
        message = f"state diverged at node {node}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class FixedPointError(ImpulseToolkitError):
    def __init__(self, slice_index: int, level: int, change: float):
        self.slice_index = slice_index
        self.level = level
        super().__init__(
            f"obstacle fixed point did not converge on slice {slice_index}, "
            f"time level {level} (last sup-change {change:.3e})"
        )


class DerivativeInconsistencyError(ImpulseToolkitError):
    def __init__(self, family: str, which: str, error: float):
        self.family = family
        super().__init__(
            f"derivative inconsistency in '{family}' ({which}): "
            f"closed form differs from finite differences by {error:.3e}"
        )


class OrderCheckInconclusiveError(ImpulseToolkitError):
    def __init__(self, claim: str, estimates):
        self.claim = claim
        self.estimates = list(estimates)
        super().__init__(f"order check inconclusive for '{claim}': estimates {self.estimates}")


class BundleMismatchError(ImpulseToolkitError):
    pass


class UnknownPresetError(ImpulseToolkitError):
    pass


class ConfigError(ImpulseToolkitError):
    pass


class MissingArtifactError(ImpulseToolkitError):
    pass
