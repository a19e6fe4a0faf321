class PadError(Exception):
    """Base class for every failure raised by the PAD pipeline."""


class ConfigError(PadError):
    pass


class ArtifactIOError(PadError):
    pass


class ImageDecodeError(PadError):
    pass


class InvalidLayout(PadError):
    pass


class UnknownDrug(PadError):
    pass


class InvalidPermutation(PadError):
    pass


class NotEnoughFiducials(PadError):
    pass


class DegenerateFiducials(PadError):
    pass


class WaxMarkNotFound(PadError):
    def __init__(self, message, score=0.0):
        super().__init__(message)
        self.score = score


class LaneTooShort(PadError):
    pass


class EmptyRegionList(PadError):
    pass


class MissingDatabaseRecord(PadError):
    pass


class NotEnoughReplicates(PadError):
    pass


class PanelTooSmall(PadError):
    pass


class SvdNotConverged(PadError):
    pass


class PatchTooLarge(PadError):
    pass


class NotEnoughDescriptors(PadError):
    pass


class InvalidCodeSize(PadError):
    pass


class FeatureKindMismatch(PadError):
    pass


class SingleClassTrainingSet(PadError):
    pass


class NotEnoughExamplesPerClass(PadError):
    pass
