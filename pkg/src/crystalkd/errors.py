"""Exception hierarchy. Each class carries the process exit code and a short
machine-readable tag used by the command line front end."""


class CrystalKDError(Exception):
    exit_code = 1
    tag = "error"


class UsageError(CrystalKDError):
    exit_code = 2
    tag = "usage"


class ConfigError(CrystalKDError, ValueError):
    exit_code = 3
    tag = "config"


class DataError(CrystalKDError, ValueError):
    exit_code = 4
    tag = "data"


class ParseError(DataError):
    tag = "parse"


class ValidationError(DataError):
    tag = "validation"


class DomainError(DataError):
    tag = "domain"


class DimensionError(DataError):
    tag = "dimension"


class CheckpointError(DataError):
    tag = "checkpoint"


class FormatError(CheckpointError):
    tag = "format"


class VersionError(CheckpointError):
    tag = "version"


class CorruptionError(CheckpointError):
    tag = "corruption"


class StateError(CrystalKDError, RuntimeError):
    exit_code = 5
    tag = "state"


class NumericalError(CrystalKDError, ArithmeticError):
    exit_code = 5
    tag = "numerical"
