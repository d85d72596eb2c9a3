"""Exception types raised across the package."""


class DatasetError(ValueError):
    """Base class for dataset validation and file-format errors."""

    def __init__(self, message, record_index=None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


class MalformedRecordError(DatasetError):
    pass


class UnknownModalityError(DatasetError):
    def __init__(self, name, record_index=None):
        super().__init__(f"unknown modality {name!r}", record_index)
        self.name = name


class DimensionMismatchError(DatasetError):
    def __init__(self, name, expected, actual, record_index=None):
        super().__init__(
            f"modality {name!r} expects length {expected}, got {actual}", record_index
        )
        self.name = name
        self.expected = expected
        self.actual = actual


class ZeroNormError(ValueError):
    """A row with zero norm was passed where a cosine is required."""

    def __init__(self, row, what="row"):
        super().__init__(f"{what} {row} has zero norm; cosine similarity is undefined")
        self.row = row


class DisconnectedNodesError(ValueError):
    """Missing nodes that cannot reach any observed node."""

    def __init__(self, nodes):
        nodes = sorted(int(n) for n in nodes)
        shown = nodes if len(nodes) <= 20 else nodes[:20] + ["..."]
        super().__init__(f"missing nodes disconnected from all observed nodes: {shown}")
        self.nodes = nodes


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"total loss became non-finite ({value}) at step {step}")
        self.step = step
