from __future__ import annotations


class MobichainError(Exception):
    """ Base mobichain error class. """


class InvalidConfigError(MobichainError):
    """ Configuration values are missing, out of range or inconsistent. """


class ChainViolationError(MobichainError):
    """ A single invariant violation found in an activity chain. """


class OverlappingActivitiesError(ChainViolationError):
    """ Two activities of a chain share time. """


class NonMonotoneTimesError(ChainViolationError):
    """ An activity ends before it starts or activities are unsorted. """


class TimeOutOfRangeError(ChainViolationError):
    """ An activity time lies outside 00:00-24:00. """


class InvalidCodeError(ChainViolationError):
    """ Activity code outside 1..15. """


class ChainValidationError(MobichainError):
    """ Activity chain failed validation; carries every violation found. """

    def __init__(self, violations: list[ChainViolationError]) -> None:
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class InvalidRecordError(MobichainError):
    """ GPS or POI record has out-of-range coordinates or an unknown category. """


class UnsortedInputError(MobichainError):
    """ GPS records of an agent are not in timestamp order. """


class EmptyTraceError(MobichainError):
    """ No GPS records were supplied. """


class InsufficientHistoryError(MobichainError):
    """ Stay history has no night observations, so HOME cannot be inferred. """


class NoNearbyPoiError(MobichainError):
    """ No POI lies within the annotation radius of a stay. """


class ShapeMismatchError(MobichainError):
    """ Operand shapes are incompatible for an operation. """

    def __init__(self, op: str, shape_a: tuple, shape_b: tuple | None = None) -> None:
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = None if shape_b is None else tuple(shape_b)
        detail = f"{self.shape_a}" if shape_b is None else f"{self.shape_a} vs {self.shape_b}"
        super().__init__(f"{op}: incompatible shapes {detail}")


class NonScalarLossError(MobichainError):
    """ Backward was called on a tensor that is not a scalar. """


class GraphConsumedError(MobichainError):
    """ Backward was already run on this graph; re-run the forward pass first. """


class UnknownTokenError(MobichainError):
    """ Input token id outside the model vocabulary. """


class UnknownGroupError(MobichainError):
    """ Layer group name is not one of the model's groups. """


class CheckpointError(MobichainError):
    """ Checkpoint file is corrupt or does not match its manifest. """


class LengthMismatchError(MobichainError):
    """ Distributions compared by JSD have different lengths. """


class NotNormalizedError(MobichainError):
    """ A distribution does not sum to one. """


class EmptyCollectionError(MobichainError):
    """ Statistics were requested for an empty chain collection. """


class EmptyDatasetError(MobichainError):
    """ A training operation received no examples. """


class IncompleteTrainingDataError(MobichainError):
    """ Base training data contains unobserved slots. """


class NoTargetDataError(MobichainError):
    """ Transfer learning received no target-region chains. """


class UnknownPresetError(MobichainError):
    """ Region preset name is not shipped. """
