"""Policy AST nodes.

References to keys, NV indices and numeric parameters stay symbolic (str) or
literal (int/bytes) in the AST. The compiler resolves them against a symbol
table. Source spans are carried for diagnostics but ignored by equality.
"""
from dataclasses import dataclass, field
from typing import Tuple, Union


@dataclass(frozen=True)
class Span:
    line: int
    col: int

    def __str__(self):
        return "%d:%d" % (self.line, self.col)


NO_SPAN = Span(0, 0)
MAX_DEPTH = 4

Ref = Union[int, str]


@dataclass(frozen=True)
class PcrAssert:
    pcrs: Tuple[int, ...]
    expected: Union[bytes, str, None] = None
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class NvAssert:
    ref: Ref
    op: str
    operand: Ref
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Or:
    branches: Tuple[Tuple["Statement", ...], ...]
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Authorize:
    key: str
    label: str
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Secret:
    ref: Ref
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Password:
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class CommandCode:
    name: str
    span: Span = field(default=NO_SPAN, compare=False)


@dataclass(frozen=True)
class Timer:
    op: str
    ms: Ref
    span: Span = field(default=NO_SPAN, compare=False)


Statement = Union[PcrAssert, NvAssert, Or, Authorize, Secret, Password, CommandCode, Timer]


@dataclass(frozen=True)
class PolicyAst:
    name: str
    statements: Tuple[Statement, ...]
    span: Span = field(default=NO_SPAN, compare=False)


def or_depth(statements) -> int:
    depth = 0
    for st in statements:
        if isinstance(st, Or):
            depth = max(depth, 1 + max(or_depth(b) for b in st.branches))
    return depth


def walk(statements):
    """Yield every statement, depth first, branches included."""
    for st in statements:
        yield st
        if isinstance(st, Or):
            for b in st.branches:
                yield from walk(b)
