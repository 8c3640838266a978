"""Policy language: parse ``.pol`` text, compile it to an EA plan, explain it."""
from .ast import PolicyAst
from .compiler import (
    CompiledPolicy,
    DigestSymbol,
    KeySymbol,
    MissingAuthorization,
    NvSymbol,
    PlanRunner,
    PlanStep,
    PolicyCompileError,
    ValueSymbol,
    compile_policy,
    explain,
    iter_steps,
    render,
)
from .parser import PolicySyntaxError, parse

__all__ = [
    "CompiledPolicy",
    "DigestSymbol",
    "KeySymbol",
    "MissingAuthorization",
    "NvSymbol",
    "PlanRunner",
    "PlanStep",
    "PolicyAst",
    "PolicyCompileError",
    "PolicySyntaxError",
    "ValueSymbol",
    "compile_policy",
    "explain",
    "iter_steps",
    "parse",
    "render",
]
