"""Exception hierarchy shared by every trapscan module."""


class TrapscanError(Exception):
    """Base class for all trapscan errors."""


class IngestionError(TrapscanError):
    """A checkpoint could not be read into memory."""


class MalformedManifest(IngestionError):
    pass


class TensorBoundsError(IngestionError):
    pass


class NonFiniteEntry(IngestionError):
    def __init__(self, layer_id: str, flat_index: int, value: float):
        super().__init__(f"layer {layer_id!r}: non-finite entry {value!r} at flat index {flat_index}")
        self.layer_id = layer_id
        self.flat_index = flat_index
        self.value = value


class NumericalError(TrapscanError):
    """Linear algebra or fitting failed."""


class DimensionError(NumericalError):
    pass


class DomainError(TrapscanError, ValueError):
    pass


class FitError(NumericalError):
    pass


class ZeroTrace(NumericalError):
    pass


class NotNormalized(TrapscanError, ValueError):
    pass


class ShapeMismatch(TrapscanError, ValueError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss!r}) at step {step}")
        self.step = step
        self.loss = loss


class LayerNotFound(TrapscanError, KeyError):
    pass


class DegenerateSVD(NumericalError):
    pass


class NonFiniteLogits(NumericalError):
    pass


class TrapNotFound(TrapscanError, IndexError):
    pass
