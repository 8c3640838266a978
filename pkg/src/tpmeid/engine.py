"""Enhanced Authorization: policy sessions, policy commands and the use-time gate.

Every policy command extends the session's ``policy_digest`` the same way a PCR
is extended::

    digest_new = H(digest_old || u32 commandCode || args)

PolicyOR and PolicyAuthorize instead *reset* the chain and start again from
the all-zero digest. The pure ``*_update`` functions below are that algebra.
The session commands wrap them with the assertion semantics:

* immediate assertions (PolicyNV, PolicyOR, PolicySecret, PolicyCounterTimer,
  PolicyAuthorize) check now and leave the digest untouched on failure;
* deferred assertions (PolicyCommandCode, PolicyAuthValue, PolicyPassword)
  always extend the digest and record a condition that :func:`gate` checks;
* PolicyPCR is combined: it optionally checks now, and it snapshots the PCR
  update counter so that :func:`gate` can detect a PCR change in between.

Trial sessions only accumulate the digest and never evaluate a precondition.
"""
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import crypto
from .constants import CC, COMMAND_NAMES, OPERATORS, SESSION_HANDLE_BASE, TIMER_OPERATORS
from .crypto import ZERO_DIGEST
from .errors import TpmError
from .store import TpmStore, get_key, pcr_composite_digest, pcr_select_bytes

TRIAL = "trial"
POLICY = "policy"

MAX_OR_DIGESTS = 8
TICKET_TAG = b"VERIFIED"


# digest algebra

def _u32(v):
    return struct.pack(">I", v)


def pcr_update(old: bytes, pcr_select: Sequence[int], pcr_digest: bytes) -> bytes:
    return crypto.extend(old, _u32(CC.PolicyPCR) + pcr_select_bytes(pcr_select) + pcr_digest)


def nv_args(operand: bytes, op: str) -> bytes:
    return crypto.hash(operand + struct.pack(">H", OPERATORS[op]))


def nv_update(old: bytes, operand: bytes, op: str, nv_name: bytes) -> bytes:
    return crypto.extend(old, _u32(CC.PolicyNV) + nv_args(operand, op) + nv_name)


def command_code_update(old: bytes, code: int) -> bytes:
    return crypto.extend(old, _u32(CC.PolicyCommandCode) + _u32(code))


def auth_value_update(old: bytes) -> bytes:
    # PolicyPassword deliberately shares PolicyAuthValue's code
    return crypto.extend(old, _u32(CC.PolicyAuthValue))


def secret_update(old: bytes, object_name: bytes) -> bytes:
    return crypto.extend(old, _u32(CC.PolicySecret) + object_name)


def counter_timer_args(reference_ms: int, op: str) -> bytes:
    return crypto.hash(struct.pack(">QH", reference_ms, OPERATORS[op]))


def counter_timer_update(old: bytes, reference_ms: int, op: str) -> bytes:
    return crypto.extend(old, _u32(CC.PolicyCounterTimer) + counter_timer_args(reference_ms, op))


def or_update(digests: Sequence[bytes]) -> bytes:
    return crypto.extend(ZERO_DIGEST, _u32(CC.PolicyOR) + b"".join(digests))


def authorize_update(key_name: bytes, policy_ref: bytes) -> bytes:
    reset = crypto.extend(ZERO_DIGEST, _u32(CC.PolicyAuthorize) + key_name)
    return crypto.extend(reset, policy_ref)


def authorization_message(approved_digest: bytes, policy_ref: bytes) -> bytes:
    """What an external authority signs to approve `approved_digest` under `policy_ref`."""
    return crypto.hash(approved_digest + policy_ref)


def compare(lhs: int, op: str, rhs: int) -> bool:
    return {
        "eq": lhs == rhs,
        "neq": lhs != rhs,
        "lt": lhs < rhs,
        "le": lhs <= rhs,
        "gt": lhs > rhs,
        "ge": lhs >= rhs,
    }[op]


# sessions

@dataclass
class PolicySession:
    handle: int
    session_type: str
    bound_object: Optional[int] = None
    policy_digest: bytes = ZERO_DIGEST
    gated_command_code: Optional[int] = None
    pcr_counter_snapshot: Optional[int] = None
    is_auth_value_needed: bool = False
    is_password_needed: bool = False

    @property
    def trial(self) -> bool:
        return self.session_type == TRIAL

    def reset(self):
        self.policy_digest = ZERO_DIGEST
        self.gated_command_code = None
        self.pcr_counter_snapshot = None
        self.is_auth_value_needed = False
        self.is_password_needed = False


@dataclass(frozen=True)
class VerificationTicket:
    key_name: bytes
    message_digest: bytes
    mac: bytes = field(repr=False)
    tag: bytes = TICKET_TAG


def _ticket_mac(store: TpmStore, tag: bytes, key_name: bytes, message_digest: bytes) -> bytes:
    return crypto.hmac(store.proof_value, tag + key_name + message_digest)


def start_auth_session(store: TpmStore, session_type: str = POLICY, bound_object: Optional[int] = None) -> int:
    if session_type not in (TRIAL, POLICY):
        raise ValueError("session type must be %r or %r" % (TRIAL, POLICY))
    with store.lock:
        if len(store.sessions) >= store.session_cap:
            raise TpmError("command", "StartAuthSession", "session_limit", str(store.session_cap))
        handle = SESSION_HANDLE_BASE + store.next_session
        store.next_session += 1
        store.sessions[handle] = PolicySession(handle, session_type, bound_object)
        return handle


def get_session(store: TpmStore, handle: int, command: str = "PolicyGetDigest") -> PolicySession:
    try:
        return store.sessions[handle]
    except KeyError:
        raise TpmError("command", command, "no_such_session", hex(handle)) from None


def flush_session(store: TpmStore, handle: int) -> None:
    store.sessions.pop(handle, None)


def policy_get_digest(store: TpmStore, handle: int) -> bytes:
    return get_session(store, handle).policy_digest


def _check_snapshot(store, s, command):
    if s.pcr_counter_snapshot is not None and s.pcr_counter_snapshot != store.pcr_bank.update_counter:
        raise TpmError("immediate", command, "pcr_changed")


# policy commands

def policy_pcr(store: TpmStore, handle: int, pcr_select: Sequence[int], expected: Optional[bytes] = None) -> bytes:
    cmd = "PolicyPCR"
    with store.lock:
        s = get_session(store, handle, cmd)
        if s.trial:
            if expected is None:
                raise TpmError("immediate", cmd, "expected_digest_required_in_trial")
            s.policy_digest = pcr_update(s.policy_digest, pcr_select, expected)
            return s.policy_digest
        _check_snapshot(store, s, cmd)
        current = pcr_composite_digest(store, pcr_select)
        if expected is not None and not crypto.constant_time_eq(current, expected):
            raise TpmError("immediate", cmd, "pcr_mismatch")
        s.policy_digest = pcr_update(s.policy_digest, pcr_select, current)
        s.pcr_counter_snapshot = store.pcr_bank.update_counter
        return s.policy_digest


def policy_nv(
    store: TpmStore,
    handle: int,
    nv_index: int,
    operand: bytes,
    op: str,
    nv_name: Optional[bytes] = None,
    authorization: Optional[bytes] = None,
) -> bytes:
    cmd = "PolicyNV"
    if op not in OPERATORS:
        raise ValueError("unknown operator %r" % (op,))
    with store.lock:
        s = get_session(store, handle, cmd)
        if s.trial:
            if nv_name is None:
                nv_name = _nv(store, nv_index, cmd).name
            s.policy_digest = nv_update(s.policy_digest, operand, op, nv_name)
            return s.policy_digest
        nv = _nv(store, nv_index, cmd)
        if not nv.attributes.open_read and (
            authorization is None or not crypto.constant_time_eq(authorization, nv.auth_value)
        ):
            raise TpmError("immediate", cmd, "nv_unreadable", hex(nv_index))
        if not compare(int.from_bytes(nv.data, "big"), op, int.from_bytes(operand, "big")):
            raise TpmError("immediate", cmd, "nv_comparison_failed",
                           "%d %s %d" % (nv.counter_value, op, int.from_bytes(operand, "big")))
        s.policy_digest = nv_update(s.policy_digest, operand, op, nv.name)
        return s.policy_digest


def _nv(store, index, cmd):
    try:
        return store.nv[index]
    except KeyError:
        raise TpmError("immediate", cmd, "no_such_nv_index", hex(index)) from None


def policy_or(store: TpmStore, handle: int, digests: Sequence[bytes]) -> bytes:
    cmd = "PolicyOR"
    if not 1 <= len(digests) <= MAX_OR_DIGESTS:
        raise TpmError("immediate", cmd, "bad_digest_list_length", str(len(digests)))
    if any(len(d) != crypto.DIGEST_SIZE for d in digests):
        raise TpmError("immediate", cmd, "bad_digest_size")
    with store.lock:
        s = get_session(store, handle, cmd)
        if not s.trial and s.policy_digest not in digests:
            raise TpmError("immediate", cmd, "digest_not_in_list")
        s.policy_digest = or_update(digests)
        return s.policy_digest


def policy_command_code(store: TpmStore, handle: int, code: int) -> bytes:
    cmd = "PolicyCommandCode"
    with store.lock:
        s = get_session(store, handle, cmd)
        if s.gated_command_code is not None and s.gated_command_code != code:
            raise TpmError("deferred", cmd, "command_code_conflict")
        s.policy_digest = command_code_update(s.policy_digest, code)
        s.gated_command_code = code
        return s.policy_digest


def policy_auth_value(store: TpmStore, handle: int) -> bytes:
    with store.lock:
        s = get_session(store, handle, "PolicyAuthValue")
        s.policy_digest = auth_value_update(s.policy_digest)
        s.is_auth_value_needed, s.is_password_needed = True, False
        return s.policy_digest


def policy_password(store: TpmStore, handle: int) -> bytes:
    with store.lock:
        s = get_session(store, handle, "PolicyPassword")
        s.policy_digest = auth_value_update(s.policy_digest)
        s.is_auth_value_needed, s.is_password_needed = False, True
        return s.policy_digest


def policy_secret(
    store: TpmStore,
    handle: int,
    referenced: int,
    secret: Optional[bytes] = None,
    object_name: Optional[bytes] = None,
) -> bytes:
    """Bind knowledge of another object's authValue into this session.

    `referenced` is an NV index or a key handle. The secret is passed directly
    rather than through a nested password session.
    """
    cmd = "PolicySecret"
    with store.lock:
        s = get_session(store, handle, cmd)
        if s.trial and object_name is not None:
            s.policy_digest = secret_update(s.policy_digest, object_name)
            return s.policy_digest
        obj = store.nv.get(referenced) or store.keys.get(referenced)
        if obj is None:
            raise TpmError("immediate", cmd, "no_such_object", hex(referenced))
        if not s.trial and (secret is None or not crypto.constant_time_eq(bytes(secret), obj.auth_value)):
            raise TpmError("immediate", cmd, "secret_mismatch")
        s.policy_digest = secret_update(s.policy_digest, obj.name)
        return s.policy_digest


def policy_counter_timer(store: TpmStore, handle: int, reference_ms: int, op: str) -> bytes:
    cmd = "PolicyCounterTimer"
    if op not in TIMER_OPERATORS:
        raise ValueError("timer operator must be one of %s" % (TIMER_OPERATORS,))
    with store.lock:
        s = get_session(store, handle, cmd)
        if not s.trial and not compare(store.clock.ms, op, reference_ms):
            raise TpmError("immediate", cmd, "timer_assertion_failed",
                           "clock %d %s %d is false" % (store.clock.ms, op, reference_ms))
        s.policy_digest = counter_timer_update(s.policy_digest, reference_ms, op)
        return s.policy_digest


def verify_signature(store: TpmStore, key_handle: int, message_digest: bytes, signature: bytes) -> VerificationTicket:
    cmd = "VerifySignature"
    with store.lock:
        key = store.loaded_external.get(key_handle)
        if key is None:
            raise TpmError("command", cmd, "no_such_key", hex(key_handle))
        if not crypto.verify(key.public_key, message_digest, signature, key.scheme):
            raise TpmError("command", cmd, "bad_signature")
        name = key.name
        return VerificationTicket(name, message_digest, _ticket_mac(store, TICKET_TAG, name, message_digest))


def policy_authorize(
    store: TpmStore,
    handle: int,
    key_name: bytes,
    policy_ref: bytes,
    ticket: Optional[VerificationTicket] = None,
) -> bytes:
    cmd = "PolicyAuthorize"
    with store.lock:
        s = get_session(store, handle, cmd)
        if not s.trial:
            if ticket is None or ticket.tag != TICKET_TAG or not crypto.constant_time_eq(
                ticket.mac, _ticket_mac(store, ticket.tag, ticket.key_name, ticket.message_digest)
            ):
                raise TpmError("immediate", cmd, "invalid_ticket")
            if ticket.key_name != key_name:
                raise TpmError("immediate", cmd, "key_name_mismatch")
            if ticket.message_digest != authorization_message(s.policy_digest, policy_ref):
                raise TpmError("immediate", cmd, "policy_not_authorized")
        s.policy_digest = authorize_update(key_name, policy_ref)
        return s.policy_digest


def policy_restart(store: TpmStore, handle: int) -> None:
    with store.lock:
        get_session(store, handle, "PolicyRestart").reset()


# use-time check

def auth_value_proof(auth_value: bytes, session_handle: int, command_code: int, message: bytes = b"") -> bytes:
    """The HMAC a caller presents when a session asked for PolicyAuthValue."""
    return crypto.hmac(auth_value, _u32(session_handle) + _u32(command_code) + message)


def gate(
    store: TpmStore,
    handle: int,
    command_code: int,
    target,
    supplied_auth: Optional[bytes] = None,
    message: bytes = b"",
) -> None:
    """Final authorization of `command_code` on `target` by a policy session.

    The session is flushed whatever the outcome. Raises TpmError(stage="gate").
    """
    cmd = _command_label(command_code)
    with store.lock:
        s = get_session(store, handle, cmd)
        flush_session(store, handle)
        if s.trial:
            raise TpmError("gate", cmd, "trial_session")
        if not crypto.constant_time_eq(s.policy_digest, target.auth_policy):
            raise TpmError("gate", cmd, "policy_digest_mismatch")
        if s.gated_command_code is not None and s.gated_command_code != command_code:
            raise TpmError("gate", cmd, "command_code_mismatch")
        if s.pcr_counter_snapshot is not None and s.pcr_counter_snapshot != store.pcr_bank.update_counter:
            raise TpmError("gate", cmd, "pcr_changed")
        if s.is_password_needed:
            if supplied_auth is None or not crypto.constant_time_eq(bytes(supplied_auth), target.auth_value):
                raise TpmError("gate", cmd, "auth_value_mismatch")
        elif s.is_auth_value_needed:
            expected = auth_value_proof(target.auth_value, handle, command_code, message)
            if supplied_auth is None or not crypto.constant_time_eq(bytes(supplied_auth), expected):
                raise TpmError("gate", cmd, "auth_value_mismatch")


def sign_gated(
    store: TpmStore,
    key_handle: int,
    message_digest: bytes,
    session: int,
    supplied_auth: Optional[bytes] = None,
) -> bytes:
    with store.lock:
        key = get_key(store, key_handle, "Sign")
        if not key.attributes.sign:
            flush_session(store, session)
            raise TpmError("command", "Sign", "not_a_signing_key", hex(key_handle))
        gate(store, session, CC.Sign, key, supplied_auth, message_digest)
        return crypto.sign(key.keypair(), message_digest)


_NAMES_BY_CODE = {int(v): k for k, v in COMMAND_NAMES.items()}


def _command_label(code):
    try:
        return CC(code).name
    except ValueError:
        return _NAMES_BY_CODE.get(code, hex(code))
