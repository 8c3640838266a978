"""Compile a policy AST to an EA command plan and its trial digest.

The trial digest is not computed by a separate formula. The compiler runs
every command through a trial session of the engine on a scratch store. Each
branch of an ``or`` gets its own trial sub-session, which replays the prefix
before the branch and then the branch's own statements. The branch's final
digest goes into the PolicyOR digest list.
"""
import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .. import crypto, engine
from ..constants import COMMAND_NAMES, CC
from ..crypto import ZERO_DIGEST
from ..store import TpmStore, new_store
from .ast import (
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
)


@dataclass(frozen=True)
class KeySymbol:
    name: bytes
    public_key: bytes = b""


@dataclass(frozen=True)
class NvSymbol:
    index: int
    name: bytes


@dataclass(frozen=True)
class ValueSymbol:
    value: int


@dataclass(frozen=True)
class DigestSymbol:
    digest: bytes


Symbol = Union[KeySymbol, NvSymbol, ValueSymbol, DigestSymbol]


class PolicyCompileError(Exception):
    def __init__(self, message: str, span: Span):
        self.message = message
        self.span = span
        super().__init__("%s: %s" % (span, message))


@dataclass(frozen=True)
class PlanStep:
    path: str
    op: str
    args: dict
    before: bytes = ZERO_DIGEST
    digest: bytes = ZERO_DIGEST
    branches: Tuple[Tuple["PlanStep", ...], ...] = ()
    span: Span = field(default=Span(0, 0), compare=False)


@dataclass(frozen=True)
class CompiledPolicy:
    name: str
    plan: Tuple[PlanStep, ...]
    trial_digest: bytes

    @property
    def branch_digests(self) -> Dict[str, List[bytes]]:
        return {s.path: list(s.args["digests"]) for s in iter_steps(self.plan) if s.op == "or"}

    def authorizations(self) -> List[PlanStep]:
        """Every authorize step; ``step.before`` is the digest an authority must approve."""
        return [s for s in iter_steps(self.plan) if s.op == "authorize"]

    def find(self, op: str, **args) -> List[PlanStep]:
        return [s for s in iter_steps(self.plan)
                if s.op == op and all(s.args.get(k) == v for k, v in args.items())]


def iter_steps(steps):
    for s in steps:
        for b in s.branches:
            yield from iter_steps(b)
        yield s


OPERAND_SIZE = 8


class _Compiler:
    def __init__(self, symbols, ref_suffix, store):
        self.symbols = symbols
        self.ref_suffix = ref_suffix
        self.store = store
        self.scratch = new_store(crypto.Drbg(b"trial"))

    def lookup(self, name, kind, span):
        sym = self.symbols.get(name)
        if sym is None:
            raise PolicyCompileError("unresolved symbol %r" % name, span)
        if not isinstance(sym, kind):
            raise PolicyCompileError("symbol %r is not a %s" % (name, kind.__name__), span)
        return sym

    def nv_ref(self, ref, span) -> NvSymbol:
        if isinstance(ref, str):
            return self.lookup(ref, NvSymbol, span)
        for sym in self.symbols.values():
            if isinstance(sym, NvSymbol) and sym.index == ref:
                return sym
        if self.store is not None and ref in self.store.nv:
            return NvSymbol(ref, self.store.nv[ref].name)
        raise PolicyCompileError("unresolved NV index %#x" % ref, span)

    def value(self, ref, span) -> int:
        if isinstance(ref, int):
            return ref
        return self.lookup(ref, ValueSymbol, span).value

    def step_for(self, st, path) -> PlanStep:
        sp = st.span
        if isinstance(st, PcrAssert):
            if st.expected is None:
                raise PolicyCompileError("PCR assertion needs an expected digest for trial evaluation", sp)
            expected = st.expected
            if isinstance(expected, str):
                expected = self.lookup(expected, DigestSymbol, sp).digest
            return PlanStep(path, "pcr", {"pcrs": st.pcrs, "expected": expected}, span=sp)
        if isinstance(st, NvAssert):
            nv = self.nv_ref(st.ref, sp)
            operand = self.value(st.operand, sp)
            if not 0 <= operand < 1 << (8 * OPERAND_SIZE):
                raise PolicyCompileError("operand out of range", sp)
            return PlanStep(path, "nv", {"index": nv.index, "name": nv.name, "op": st.op,
                                         "operand": operand.to_bytes(OPERAND_SIZE, "big")}, span=sp)
        if isinstance(st, Authorize):
            key = self.lookup(st.key, KeySymbol, sp)
            return PlanStep(path, "authorize", {"key": st.key, "key_name": key.name, "public_key": key.public_key,
                                                "policy_ref": st.label.encode() + self.ref_suffix}, span=sp)
        if isinstance(st, Secret):
            nv = self.nv_ref(st.ref, sp)
            return PlanStep(path, "secret", {"index": nv.index, "name": nv.name}, span=sp)
        if isinstance(st, Password):
            return PlanStep(path, "password", {}, span=sp)
        if isinstance(st, CommandCode):
            if st.name not in COMMAND_NAMES:
                raise PolicyCompileError("unknown command %r" % st.name, sp)
            return PlanStep(path, "command", {"name": st.name, "code": int(COMMAND_NAMES[st.name])}, span=sp)
        if isinstance(st, Timer):
            return PlanStep(path, "timer", {"op": st.op, "ms": self.value(st.ms, sp)}, span=sp)
        raise TypeError("not a statement: %r" % (st,))

    def block(self, stmts, prefix, base) -> List[PlanStep]:
        h = engine.start_auth_session(self.scratch, engine.TRIAL)
        try:
            for s in prefix:
                apply_trial(self.scratch, h, s)
            out = []
            for i, st in enumerate(stmts, 1):
                path = "%s%d" % (base, i)
                if isinstance(st, Or):
                    if len(st.branches) > engine.MAX_OR_DIGESTS:
                        raise PolicyCompileError(
                            "or with %d branches exceeds the limit of %d" % (len(st.branches), engine.MAX_OR_DIGESTS),
                            st.span)
                    branches = tuple(
                        tuple(self.block(b, list(prefix) + out, "%s.%d." % (path, j)))
                        for j, b in enumerate(st.branches, 1)
                    )
                    step = PlanStep(path, "or", {"digests": tuple(b[-1].digest for b in branches)},
                                    branches=branches, span=st.span)
                else:
                    step = self.step_for(st, path)
                before = engine.policy_get_digest(self.scratch, h)
                after = apply_trial(self.scratch, h, step)
                out.append(dataclasses.replace(step, before=before, digest=after))
            return out
        finally:
            engine.flush_session(self.scratch, h)


def apply_trial(store: TpmStore, handle: int, step: PlanStep) -> bytes:
    a = step.args
    if step.op == "pcr":
        return engine.policy_pcr(store, handle, a["pcrs"], a["expected"])
    if step.op == "nv":
        return engine.policy_nv(store, handle, a["index"], a["operand"], a["op"], nv_name=a["name"])
    if step.op == "or":
        return engine.policy_or(store, handle, a["digests"])
    if step.op == "authorize":
        return engine.policy_authorize(store, handle, a["key_name"], a["policy_ref"])
    if step.op == "secret":
        return engine.policy_secret(store, handle, a["index"], object_name=a["name"])
    if step.op == "password":
        return engine.policy_password(store, handle)
    if step.op == "command":
        return engine.policy_command_code(store, handle, a["code"])
    if step.op == "timer":
        return engine.policy_counter_timer(store, handle, a["ms"], a["op"])
    raise ValueError("unknown plan op %r" % step.op)


def compile_policy(
    ast: PolicyAst,
    symbols: Mapping[str, Symbol] = None,
    ref_suffix: bytes = b"",
    store: Optional[TpmStore] = None,
) -> CompiledPolicy:
    """Resolve symbols, build the command plan and compute the trial digest.

    `ref_suffix` is appended to every authorize label (the per-device part of
    the policyRef). `store`, if given, resolves bare NV index literals.
    """
    c = _Compiler(dict(symbols or {}), ref_suffix, store)
    try:
        plan = tuple(c.block(ast.statements, [], ""))
    except engine.TpmError as e:
        raise PolicyCompileError(str(e), ast.span) from e
    return CompiledPolicy(ast.name, plan, plan[-1].digest if plan else ZERO_DIGEST)


# explain

_OP_LABELS = {
    "pcr": "PolicyPCR",
    "nv": "PolicyNV",
    "or": "PolicyOR",
    "authorize": "PolicyAuthorize",
    "secret": "PolicySecret",
    "password": "PolicyPassword",
    "command": "PolicyCommandCode",
    "timer": "PolicyCounterTimer",
}


def _show_bytes(b: bytes) -> str:
    if b and all(0x21 <= c < 0x7F for c in b):
        return b.decode()
    return "0x" + b.hex()


def describe(step: PlanStep) -> str:
    a = step.args
    if step.op == "pcr":
        return "pcrs=%s expected=%s" % (",".join(map(str, a["pcrs"])), a["expected"].hex())
    if step.op == "nv":
        return "index=%#x %s operand=%d name=%s" % (a["index"], a["op"], int.from_bytes(a["operand"], "big"),
                                                    a["name"].hex())
    if step.op == "or":
        return "digests=" + ",".join(d.hex() for d in a["digests"])
    if step.op == "authorize":
        return "key=%s name=%s ref=%s" % (a["key"], a["key_name"].hex(), _show_bytes(a["policy_ref"]))
    if step.op == "secret":
        return "index=%#x name=%s" % (a["index"], a["name"].hex())
    if step.op == "command":
        return "code=%s(%#010x)" % (CC(a["code"]).name, a["code"])
    if step.op == "timer":
        return "%s %d" % (a["op"], a["ms"])
    return "-"


def explain(compiled: CompiledPolicy) -> str:
    """Tab-separated step table: step, command, arguments, digest after the step."""
    rows = [("0", "StartAuthSession", "trial", ZERO_DIGEST.hex())]
    for s in iter_steps(compiled.plan):
        rows.append((s.path, _OP_LABELS[s.op], describe(s), s.digest.hex()))
    return "".join("\t".join(r) + "\n" for r in rows)


# render

def _render_ref(ref, as_hex=False):
    if isinstance(ref, str):
        return ref
    return "%#x" % ref if as_hex else str(ref)


def _render_stmt(st, indent) -> List[str]:
    pad = "    " * indent
    if isinstance(st, PcrAssert):
        text = "pcr " + ",".join(map(str, st.pcrs))
        if isinstance(st.expected, bytes):
            text += " = 0x" + st.expected.hex()
        elif st.expected is not None:
            text += " = " + st.expected
        return [pad + text + ";"]
    if isinstance(st, NvAssert):
        return [pad + "nv %s %s %s;" % (_render_ref(st.ref, True), st.op, _render_ref(st.operand))]
    if isinstance(st, Or):
        lines = [pad + "or {"]
        for j, b in enumerate(st.branches):
            if j:
                lines.append(pad + "|")
            for sub in b:
                lines.extend(_render_stmt(sub, indent + 1))
        lines.append(pad + "}")
        return lines
    if isinstance(st, Authorize):
        return [pad + 'authorize %s "%s";' % (st.key, st.label)]
    if isinstance(st, Secret):
        return [pad + "secret %s;" % _render_ref(st.ref, True)]
    if isinstance(st, Password):
        return [pad + "password;"]
    if isinstance(st, CommandCode):
        return [pad + "command %s;" % st.name]
    if isinstance(st, Timer):
        return [pad + "timer %s %s;" % (st.op, _render_ref(st.ms))]
    raise TypeError("not a statement: %r" % (st,))


def render(ast: PolicyAst) -> str:
    """Canonical pretty-printer; parse(render(a)) == a."""
    lines = ["policy %s {" % ast.name]
    for st in ast.statements:
        lines.extend(_render_stmt(st, 1))
    lines.append("}")
    return "\n".join(lines) + "\n"


# replay in a real session

class MissingAuthorization(LookupError):
    pass


class PlanRunner:
    """Replay a compiled plan in a real policy session.

    Subclasses override :meth:`choose` (which or-branch to satisfy),
    :meth:`secret`, :meth:`ticket` and :meth:`after_step` to inject side
    effects such as counter increments between steps.
    """

    def __init__(self, store: TpmStore, session: int, *, secrets=None, licenses=None, choices=None,
                 immediate_pcr: bool = False):
        self.store = store
        self.session = session
        self.secrets = dict(secrets or {})
        self.licenses = dict(licenses or {})
        self.choices = dict(choices or {})
        self.immediate_pcr = immediate_pcr
        self._loaded = {}

    def run(self, steps: Sequence[PlanStep]) -> bytes:
        for step in steps:
            self.run_step(step)
        return engine.policy_get_digest(self.store, self.session)

    def run_step(self, step: PlanStep) -> None:
        st, h, a = self.store, self.session, step.args
        if step.op == "or":
            self.run(step.branches[self.choose(step)])
            engine.policy_or(st, h, a["digests"])
        elif step.op == "pcr":
            engine.policy_pcr(st, h, a["pcrs"], a["expected"] if self.immediate_pcr else None)
        elif step.op == "nv":
            engine.policy_nv(st, h, a["index"], a["operand"], a["op"])
        elif step.op == "authorize":
            engine.policy_authorize(st, h, a["key_name"], a["policy_ref"], self.ticket(step))
        elif step.op == "secret":
            engine.policy_secret(st, h, a["index"], self.secret(step))
        elif step.op == "password":
            engine.policy_password(st, h)
        elif step.op == "command":
            engine.policy_command_code(st, h, a["code"])
        elif step.op == "timer":
            engine.policy_counter_timer(st, h, a["ms"], a["op"])
        else:
            raise ValueError("unknown plan op %r" % step.op)
        self.after_step(step)

    def choose(self, step: PlanStep) -> int:
        try:
            return self.choices[step.path]
        except KeyError:
            raise LookupError("no branch chosen for or-step %s" % step.path) from None

    def secret(self, step: PlanStep) -> bytes:
        return self.secrets.get(step.args["index"], b"")

    def ticket(self, step: PlanStep):
        a = step.args
        lic = self.licenses.get(a["policy_ref"])
        if lic is None:
            raise MissingAuthorization(a["policy_ref"])
        handle = self._loaded.get(a["public_key"])
        if handle is None:
            from ..store import load_external

            handle = self._loaded[a["public_key"]] = load_external(self.store, a["public_key"])
        message = engine.authorization_message(lic.approved_digest, a["policy_ref"])
        return engine.verify_signature(self.store, handle, message, lic.signature)

    def after_step(self, step: PlanStep) -> None:
        pass
