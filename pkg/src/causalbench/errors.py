"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class CausalBenchError(Exception):
    exit_code = 5


class ConfigError(CausalBenchError):
    exit_code = 2


class DataError(CausalBenchError):
    exit_code = 3


class SchemaError(DataError):
    pass


class LabelError(DataError):
    pass


class ShapeError(DataError):
    pass


class EmptyControlError(DataError):
    pass


class DegenerateGeneError(DataError):
    def __init__(self, genes):
        self.genes = list(genes)
        super().__init__(
            "zero control standard deviation for genes: " + ", ".join(self.genes)
        )


class PanelError(DataError):
    pass


class AcyclicityError(DataError):
    pass


class UnsupportedSizeError(DataError):
    pass


class UndefinedAUROCError(DataError):
    pass


class CacheIntegrityError(DataError):
    pass


class CorpusMissError(DataError):
    pass


class MappingError(DataError):
    pass


class NetworkError(CausalBenchError):
    exit_code = 4


class TransportError(NetworkError):
    def __init__(self, message, entry=None):
        self.entry = entry
        super().__init__(message)


class EndpointError(NetworkError):
    def __init__(self, message, status_code=None, body=None):
        self.status_code = status_code
        self.body = body
        super().__init__(message)


class GatewayTimeout(NetworkError):
    pass


class RetrievalError(NetworkError):
    pass


class CampaignHalted(NetworkError):
    """Raised when a campaign stops on an unrecoverable transport error.

    Completed entries are already in the cache, so rerunning the same plan
    resumes from where it stopped.
    """

    def __init__(self, entry, completed, cause):
        self.entry = entry
        self.completed = completed
        self.cause = cause
        super().__init__(
            f"campaign halted at {entry} after {completed} completed entries: {cause}"
        )
