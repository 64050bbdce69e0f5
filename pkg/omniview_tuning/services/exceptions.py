class DimensionError(Exception):
    pass


class NormalizationError(Exception):
    pass


class ConfigError(Exception):
    pass


class NonFiniteError(Exception):
    pass


class DatasetError(Exception):
    pass


class DatasetFormatError(Exception):
    def __init__(self, line_number: int, reason: str):
        super().__init__(f"line {line_number}: {reason}")
        self.line_number = line_number


class SeparationError(Exception):
    pass


class CheckpointError(Exception):
    pass


class FrozenWeightsModified(Exception):
    pass
