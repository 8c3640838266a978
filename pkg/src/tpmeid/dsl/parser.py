"""Lexer and recursive-descent parser for ``.pol`` policy files.

Grammar (EBNF)::

    file      = "policy" IDENT "{" { statement } "}" ;
    statement = "pcr" INT { "," INT } [ "=" ( DIGEST | IDENT ) ] ";"
              | "nv" ref CMP value ";"
              | "or" "{" branch { "|" branch } "}"
              | "authorize" IDENT STRING ";"
              | "secret" ref ";"
              | "password" ";"
              | "command" IDENT ";"
              | "timer" TCMP value ";" ;
    branch    = statement { statement } ;
    ref       = IDENT | INT ;
    value     = IDENT | INT ;
    CMP       = "eq" | "neq" | "lt" | "le" | "gt" | "ge" ;
    TCMP      = "lt" | "le" | "gt" | "ge" ;
    INT       = decimal digits | "0x" hex digits ;
    DIGEST    = "0x" followed by exactly 64 hex digits ;
    STRING    = '"' { any char except '"' and newline } '"' ;

``#`` starts a comment that runs to the end of the line.
"""
import re
from dataclasses import dataclass
from typing import List, Tuple

from ..constants import OPERATORS, TIMER_OPERATORS
from .ast import (
    MAX_DEPTH,
    Authorize,
    CommandCode,
    NvAssert,
    Or,
    Password,
    PcrAssert,
    PolicyAst,
    Secret,
    Span,
    Timer,
    or_depth,
)

KEYWORDS = ("pcr", "nv", "or", "authorize", "secret", "password", "command", "timer")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<int>0[xX][0-9A-Fa-f]+|[0-9]+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"[^"\n]*")
  | (?P<punct>[{};|=,])
    """,
    re.VERBOSE,
)


class PolicySyntaxError(Exception):
    def __init__(self, message: str, span: Span, expected: Tuple[str, ...] = ()):
        self.message = message
        self.span = span
        self.expected = tuple(expected)
        text = "%s: %s" % (span, message)
        if expected:
            text += " (expected %s)" % ", ".join(expected)
        super().__init__(text)


@dataclass(frozen=True)
class Token:
    kind: str  # int, ident, string, punct, eof
    text: str
    span: Span


def tokenize(source: str) -> List[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise PolicySyntaxError("unexpected character %r" % source[pos],
                                    Span(line, pos - line_start + 1))
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), Span(line, pos - line_start + 1)))
        pos = m.end()
    tokens.append(Token("eof", "", Span(line, pos - line_start + 1)))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0
        self.open_braces = []

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def advance(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def error(self, message, expected=()):
        t = self.tok
        if t.kind == "eof" and self.open_braces:
            # report the unclosed brace, not the end of input
            raise PolicySyntaxError("unclosed '{'", self.open_braces[-1], ("}",))
        raise PolicySyntaxError(message, t.span, expected)

    def describe(self, t):
        return "end of input" if t.kind == "eof" else repr(t.text)

    def expect_punct(self, p) -> Token:
        if self.tok.kind == "punct" and self.tok.text == p:
            return self.advance()
        self.error("unexpected %s" % self.describe(self.tok), ("'%s'" % p,))

    def expect_kind(self, kind, what) -> Token:
        if self.tok.kind == kind:
            return self.advance()
        self.error("unexpected %s" % self.describe(self.tok), (what,))

    def expect_word(self, words, what) -> Token:
        if self.tok.kind == "ident" and self.tok.text in words:
            return self.advance()
        self.error("unexpected %s" % self.describe(self.tok), tuple(words) or (what,))

    def at_punct(self, p):
        return self.tok.kind == "punct" and self.tok.text == p

    # grammar

    def policy(self) -> PolicyAst:
        start = self.expect_word(("policy",), "policy")
        name = self.expect_kind("ident", "policy name").text
        stmts = self.block()
        if self.tok.kind != "eof":
            self.error("unexpected %s after policy" % self.describe(self.tok), ("end of input",))
        return PolicyAst(name, stmts, start.span)

    def block(self):
        brace = self.expect_punct("{")
        self.open_braces.append(brace.span)
        stmts = []
        while not self.at_punct("}"):
            stmts.append(self.statement())
        self.advance()
        self.open_braces.pop()
        return tuple(stmts)

    def statement(self):
        t = self.tok
        if t.kind != "ident":
            self.error("unexpected %s" % self.describe(t), ("statement",))
        if t.text not in KEYWORDS:
            raise PolicySyntaxError("unknown statement %r" % t.text, t.span, KEYWORDS)
        self.advance()
        return getattr(self, "st_" + t.text)(t.span)

    def end(self):
        self.expect_punct(";")

    def ref(self, what):
        t = self.tok
        if t.kind == "int":
            self.advance()
            return int(t.text, 0)
        if t.kind == "ident":
            self.advance()
            return t.text
        self.error("unexpected %s" % self.describe(t), (what,))

    def st_pcr(self, span):
        pcrs = [self.pcr_index()]
        while self.at_punct(","):
            self.advance()
            pcrs.append(self.pcr_index())
        expected = None
        if self.at_punct("="):
            self.advance()
            t = self.tok
            if t.kind == "ident":
                expected = self.advance().text
            elif t.kind == "int" and t.text[:2].lower() == "0x":
                if len(t.text) != 2 + 64:
                    raise PolicySyntaxError("digest literal must be 32 bytes", t.span)
                expected = bytes.fromhex(self.advance().text[2:])
            else:
                self.error("unexpected %s" % self.describe(t), ("digest literal", "symbol"))
        self.end()
        return PcrAssert(tuple(pcrs), expected, span)

    def pcr_index(self):
        t = self.expect_kind("int", "PCR index")
        v = int(t.text, 0)
        if not 0 <= v < 24:
            raise PolicySyntaxError("PCR index %d out of range" % v, t.span)
        return v

    def st_nv(self, span):
        ref = self.ref("NV index or symbol")
        op = self.expect_word(tuple(OPERATORS), "comparison").text
        operand = self.ref("operand")
        self.end()
        return NvAssert(ref, op, operand, span)

    def st_or(self, span):
        brace = self.expect_punct("{")
        self.open_braces.append(brace.span)
        branches = [self.branch()]
        while self.at_punct("|"):
            self.advance()
            branches.append(self.branch())
        self.expect_punct("}")
        self.open_braces.pop()
        node = Or(tuple(branches), span)
        if or_depth((node,)) > MAX_DEPTH:
            raise PolicySyntaxError("or-nesting deeper than %d" % MAX_DEPTH, span)
        return node

    def branch(self):
        if self.at_punct("|") or self.at_punct("}"):
            self.error("empty or-branch", ("statement",))
        stmts = []
        while not (self.at_punct("|") or self.at_punct("}")):
            stmts.append(self.statement())
        return tuple(stmts)

    def st_authorize(self, span):
        key = self.expect_kind("ident", "key symbol").text
        label = self.expect_kind("string", "policyRef string").text[1:-1]
        self.end()
        return Authorize(key, label, span)

    def st_secret(self, span):
        ref = self.ref("NV index or symbol")
        self.end()
        return Secret(ref, span)

    def st_password(self, span):
        self.end()
        return Password(span)

    def st_command(self, span):
        name = self.expect_kind("ident", "command name").text
        self.end()
        return CommandCode(name, span)

    def st_timer(self, span):
        op = self.expect_word(TIMER_OPERATORS, "timer comparison").text
        ms = self.ref("milliseconds")
        self.end()
        return Timer(op, ms, span)


def parse(source: str) -> PolicyAst:
    """Parse one policy. Raises PolicySyntaxError with a line:column span."""
    return _Parser(tokenize(source)).policy()
