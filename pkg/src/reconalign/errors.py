"""Exception hierarchy shared by all modules."""


class ReconAlignError(Exception):
    """Base class for every error raised by this package."""


class UserError(ReconAlignError):
    """Bad input supplied by the caller (missing files, invalid arguments)."""


class ManifestError(ReconAlignError):
    pass


class ReconstructionError(ReconAlignError):
    pass


class AugmentationError(ReconAlignError):
    pass


class DetectorError(ReconAlignError):
    pass


class TrainingError(ReconAlignError):
    pass


class EvaluationError(ReconAlignError):
    pass


class TextureError(ReconAlignError):
    pass


class ConstantRenderError(TextureError):
    """Rendered texture has zero variance; the caller should resample the program."""


class AccountingError(ReconAlignError):
    pass
