"""Exception hierarchy shared across the toolkit."""


class HistoEvalError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HistoEvalError):
    pass


class DataIntegrityError(HistoEvalError):
    pass


class SplitUnavailableError(HistoEvalError):
    pass


class SamplingError(HistoEvalError):
    pass


class ShapeError(HistoEvalError):
    pass


class EmptyInputError(HistoEvalError):
    pass


class DegenerateLabelsError(HistoEvalError):
    pass


class BootstrapError(HistoEvalError):
    pass


class ProtocolError(HistoEvalError):
    pass


class RuleCoverageError(HistoEvalError):
    pass


class CapabilityError(HistoEvalError):
    pass


class ZeroRelevanceError(HistoEvalError):
    pass


class DegenerateCorrelationError(HistoEvalError):
    pass


class DegenerateBaselineError(HistoEvalError):
    pass
