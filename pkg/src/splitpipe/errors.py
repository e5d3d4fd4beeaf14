"""Exception hierarchy.

Two families matter to the CLI: ``InputError`` (bad or unreadable input, exit
code 2) and ``DomainError`` (a well-formed request that violates a domain
invariant, exit code 3).
"""

from __future__ import annotations


class SplitPipeError(Exception):
    pass


class InputError(SplitPipeError):
    pass


class DomainError(SplitPipeError):
    pass


class ParseError(InputError):
    def __init__(self, line: int, message: str = ""):
        self.line = line
        super().__init__(f"line {line}: {message}" if message else f"line {line}")


class ShapeMismatch(DomainError):
    def __init__(self, where, expected, got):
        # ``where`` is a unit index for model chains or an op name for matrices
        self.unit_index = where if isinstance(where, int) else None
        self.expected = expected
        self.got = got
        label = f"unit {where}" if isinstance(where, int) else str(where)
        super().__init__(f"{label}: expected {expected}, got {got}")


class DegenerateShape(DomainError):
    def __init__(self, unit_index: int, detail: str = ""):
        self.unit_index = unit_index
        super().__init__(f"unit {unit_index}: degenerate shape {detail}".rstrip())


class ShapesMissing(DomainError):
    pass


class SingleUnitModel(DomainError):
    pass


class UnknownModel(DomainError):
    pass


class GenerationFailed(DomainError):
    def __init__(self, seed: int):
        self.seed = seed
        super().__init__(f"could not build a shape-compatible model for seed {seed}")


class IndexOutOfRange(DomainError):
    pass


class MissingUnit(InputError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"measured profile has no row for unit {index}")


class InvalidParam(DomainError):
    pass


class LengthMismatch(DomainError):
    pass


class NonScalarLoss(DomainError):
    pass


class EmptyDataset(DomainError):
    pass


class EmptyTestSet(DomainError):
    pass
