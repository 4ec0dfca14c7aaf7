class NamSegError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class DimensionError(NamSegError):
    pass


class GeometryError(NamSegError):
    pass


class ConfigError(NamSegError):
    pass


class DataError(NamSegError):
    pass


class FormatError(NamSegError):
    pass


class LabelIndexError(NamSegError, IndexError):
    pass


class StateError(NamSegError):
    pass


class NumericError(NamSegError):
    pass


class DomainError(NamSegError):
    pass


class DegenerateMapError(NamSegError):
    pass


class SelectionError(NamSegError):
    pass


class UsageError(NamSegError):
    exit_code = 2
