"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid user-supplied setting (bad parameter value, unknown name)."""


class NumericalError(ArithmeticError):
    """A factorization or linear solve failed, or produced unusable output."""


class DegenerateEnsembleError(NumericalError):
    """The particle ensemble has collapsed so no kernel bandwidth exists."""


class NonFiniteError(NumericalError):
    """A particle or gradient became NaN/Inf.

    Attributes:
        particle: index of the first offending particle, if known.
    """

    def __init__(self, message, particle=None):
        super().__init__(message)
        self.particle = particle


class SamplerAborted(RuntimeError):
    """A sampler run stopped on an error; the work done so far is attached.

    Attributes:
        records: iteration records completed before the failure.
        ensemble: last valid ensemble.
    """

    def __init__(self, message, records, ensemble):
        super().__init__(message)
        self.records = records
        self.ensemble = ensemble
