from dataclasses import dataclass
import protofed.protofed_types as internal
from typing import Optional
import logging


class ProtoFedException(Exception):

    def __init__(self, *args):
        if len(args) == 1:
            self.message = args[0]
        else:
            self.message = args
        logging.exception(self.message)
        super().__init__(self.message)


class ConfigurationError(ProtoFedException):
    pass


class DataError(ProtoFedException):
    pass


class NumericError(ProtoFedException):
    pass


class VersionError(ProtoFedException):
    pass


class ProtocolError(ProtoFedException):

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class FormatError(ProtocolError):
    pass


@dataclass(frozen=True)
class Box(object):
    x: int
    y: int
    w: int
    h: int

    def __repr__(self):
        return "'Box: x {}, y {}, {}x{}'".format(self.x, self.y, self.w,
                                                 self.h)

    @property
    def area(self) -> int:
        return self.w * self.h

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.w, self.h


@dataclass(frozen=True)
class ParameterCheck(object):
    name: str
    max_relative_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    passed: bool


@dataclass(frozen=True)
class GradCheckReport(object):
    checks: tuple
    tolerance: float

    def __repr__(self):
        return "'GradCheck: {} parameters, max rel. error {:.3e}, {}'".format(
            len(self.checks), self.max_relative_error,
            "pass" if self.passed else "FAIL")

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_relative_error(self) -> float:
        return max((c.max_relative_error for c in self.checks), default=0.0)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]


class PayloadGroups(object):
    """Flag set naming the parameter groups a payload carries."""
    _bits = internal.__PayloadGroupBits__

    def __init__(self, value: int):
        known = sum(self._bits.values())
        if value & ~known:
            raise ProtocolError(f"unknown payload group flags {value:#x}")
        self._value = value

    @classmethod
    def from_strings(cls, *names: str) -> "PayloadGroups":
        unknown = [n for n in names if n not in cls._bits]
        if unknown:
            raise ProtocolError(f"unknown payload group(s) {unknown}")
        value = 0
        for name in names:
            value |= cls._bits[name]
        return cls(value)

    def strings(self) -> list[str]:
        return [name for name, bit in self._bits.items() if bit & self._value]

    def __repr__(self):
        return f"PayloadGroups({self.strings()})"

    def __int__(self):
        return self._value

    def __len__(self):
        return len(self.strings())

    def __iter__(self):
        return iter(self.strings())

    def __eq__(self, other):
        return isinstance(other, PayloadGroups) and int(other) == self._value

    def __hash__(self):
        return hash(self._value)

    def __contains__(self, name: str):
        return bool(self._bits[name] & self._value)
