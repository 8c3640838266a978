"""eID helper: the untrusted orchestration layer in front of the TPM.

The helper provisions the PIN, PUK and retry-counter NV indices, enrols
signing keys with the RA and drives the policy sessions for signing, counter
reset, PIN change and revocation-license refresh. It holds no secret that the
TPM does not check itself, so a misbehaving helper can deny service but can
never produce a signature on its own.

Signing policy, in order::

    pcr 0 = platform_pcrs;        # platform integrity
    authorize ra "platform";
    or { nv counter eq 0; nv counter eq 1; | ... }   # one attempt consumed
    authorize ra "pincount";
    secret pin;                   # PIN entry
    authorize ra "pinentry";
    [timer lt window; authorize ra "revocation";]
    command sign;

The counter is incremented between the two ``nv`` assertions of the chosen
pair. After a successful signature the counter is reset by undefining and
redefining it, which its own policy allows with the PIN (within one more
attempt) or with the PUK.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

from . import crypto, engine
from .dsl import (
    CompiledPolicy,
    DigestSymbol,
    KeySymbol,
    MissingAuthorization,
    NvSymbol,
    PlanRunner,
    ValueSymbol,
    compile_policy,
    iter_steps,
    render,
)
from .dsl.ast import Authorize, CommandCode, NvAssert, Or, PcrAssert, PolicyAst, Secret, Timer
from .errors import EidError, RaError, StateFileError, TpmError
from .ra import AuthorizationLicense, Certificate, RegistrationAuthority, credential_id, policy_ref_for
from .store import (
    NvAttributes,
    PolicyAuth,
    TpmStore,
    clock_read,
    create_key,
    nv_define_space,
    nv_increment,
    nv_public_area,
    nv_read_counter,
    nv_undefine_space,
    pcr_composite_digest,
    read_container,
    write_container,
)

DEFAULT_MAX_ATTEMPTS = 3
DEFAULT_PIN_LENGTH = (4, 12)
DEFAULT_WINDOW_MS = 24 * 3600 * 1000
COUNTER_INDEX = 0x1500
PIN_INDEX = 0x1501
PUK_INDEX = 0x1502
PUK_BYTES = 16
WALLET_KIND = "eid-wallet"
BUNDLE_KIND = "eid-credential"

COUNTER_ATTRIBUTES = NvAttributes(is_counter=True, open_increment=True, open_read=True, policy_delete=True)
SECRET_ATTRIBUTES = NvAttributes()


class SimulatedPowerLoss(Exception):
    """Raised by a fault hook to model a crash at a named point."""


# policy sources

def eid_policy_ast(max_attempts: int = DEFAULT_MAX_ATTEMPTS, revocable: bool = False) -> PolicyAst:
    pairs = tuple(
        (NvAssert("counter", "eq", n), NvAssert("counter", "eq", n + 1)) for n in range(max_attempts)
    )
    stmts = [
        PcrAssert((0,), "platform_pcrs"),
        Authorize("ra", "platform"),
        Or(pairs),
        Authorize("ra", "pincount"),
        Secret("pin"),
        Authorize("ra", "pinentry"),
    ]
    if revocable:
        stmts += [Timer("lt", "window"), Authorize("ra", "revocation")]
    stmts.append(CommandCode("sign"))
    return PolicyAst("eid_sign_revocable" if revocable else "eid_sign", tuple(stmts))


def counter_reset_ast(max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> PolicyAst:
    # PIN path accepts one pair beyond the signing policy (limit n+1)
    pairs = tuple(
        (NvAssert("counter", "eq", n), NvAssert("counter", "eq", n + 1)) for n in range(max_attempts + 1)
    )
    reset = (
        PcrAssert((0,), "platform_pcrs"),
        Authorize("ra", "platform"),
        Or(((Or(pairs), Secret("pin")), (Secret("puk"),))),
        Authorize("ra", "reset"),
        CommandCode("nv_undefine"),
    )
    return PolicyAst("counter_reset", (Or((reset, (CommandCode("nv_increment"),), (CommandCode("nv_read"),))),))


def eid_policy_source(max_attempts: int = DEFAULT_MAX_ATTEMPTS, revocable: bool = False) -> str:
    return render(eid_policy_ast(max_attempts, revocable))


def counter_reset_source(max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> str:
    return render(counter_reset_ast(max_attempts))


# records

@dataclass(frozen=True)
class PinRecord:
    nv_index: int
    name: bytes


@dataclass(frozen=True)
class PukRecord:
    nv_index: int
    name: bytes


@dataclass
class CounterRecord:
    nv_index: int
    name: bytes
    auth_policy: bytes
    max_attempts: int
    licenses: Dict[str, AuthorizationLicense] = field(default_factory=dict)


@dataclass
class EidCredential:
    key_handle: int
    key_name: bytes
    certificate: Certificate
    pin_index: int
    counter_index: int
    puk_index: int
    licenses: Dict[str, AuthorizationLicense]
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    revocable: bool = False
    window_end_ms: Optional[int] = None

    @property
    def cred_id(self) -> str:
        return credential_id(self.key_name)

    def to_json(self) -> dict:
        return {
            "credId": self.cred_id,
            "keyHandle": self.key_handle,
            "keyName": self.key_name.hex(),
            "certificate": self.certificate.to_json(),
            "pinIndex": self.pin_index,
            "counterIndex": self.counter_index,
            "pukIndex": self.puk_index,
            "licenses": {k: v.to_json() for k, v in sorted(self.licenses.items())},
            "maxAttempts": self.max_attempts,
            "revocable": self.revocable,
            "windowEndMs": self.window_end_ms,
        }

    @classmethod
    def from_json(cls, d) -> "EidCredential":
        return cls(
            d["keyHandle"], bytes.fromhex(d["keyName"]), Certificate.from_json(d["certificate"]),
            d["pinIndex"], d["counterIndex"], d["pukIndex"],
            {k: AuthorizationLicense.from_json(v) for k, v in d["licenses"].items()},
            d["maxAttempts"], d["revocable"], d["windowEndMs"],
        )


def _wipe(buf: bytearray) -> None:
    for i in range(len(buf)):
        buf[i] = 0


def _secret_buffer(value) -> bytearray:
    # a caller-owned bytearray is used (and wiped) in place
    if isinstance(value, bytearray):
        return value
    return bytearray(value.encode() if isinstance(value, str) else value)


class _HelperRunner(PlanRunner):
    """Picks the branch holding the wanted secret, or the counter pair that
    matches the live counter value, and increments inside that pair."""

    def __init__(self, helper, session, secret_index, **kw):
        super().__init__(helper.store, session, **kw)
        self.helper = helper
        self.secret_index = secret_index
        self.increment_after = None

    def choose(self, step):
        for i, branch in enumerate(step.branches):
            if any(s.op == "secret" and s.args["index"] == self.secret_index for s in iter_steps(branch)):
                return i
        ci = self.helper.counter_index
        n = nv_read_counter(self.store, ci)
        for i, branch in enumerate(step.branches):
            first = branch[0]
            if (first.op == "nv" and first.args["index"] == ci and first.args["op"] == "eq"
                    and int.from_bytes(first.args["operand"], "big") == n):
                self.increment_after = first.path
                return i
        raise EidError("attempts_exhausted", remaining_attempts=0)

    def after_step(self, step):
        if step.path == self.increment_after:
            nv_increment(self.store, self.helper.counter_index)


class EidHelper:
    def __init__(
        self,
        store: TpmStore,
        ra: RegistrationAuthority,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        pin_length: Tuple[int, int] = DEFAULT_PIN_LENGTH,
        counter_index: int = COUNTER_INDEX,
        pin_index: int = PIN_INDEX,
        puk_index: int = PUK_INDEX,
    ):
        if not 1 <= max_attempts <= engine.MAX_OR_DIGESTS - 1:
            raise ValueError("max_attempts must be between 1 and %d" % (engine.MAX_OR_DIGESTS - 1))
        self.store = store
        self.ra = ra
        self.max_attempts = max_attempts
        self.pin_length = pin_length
        self.counter_index = counter_index
        self.pin_index = pin_index
        self.puk_index = puk_index
        self.pin: Optional[PinRecord] = None
        self.puk: Optional[PukRecord] = None
        self.counter: Optional[CounterRecord] = None
        self.credentials: Dict[str, EidCredential] = {}
        self.pending_puk: Optional[str] = None
        self.platform_auth: Optional[bytes] = None
        # test hook: called with a fault-point name, may raise SimulatedPowerLoss
        self.fault: Optional[Callable[[str], None]] = None

    @property
    def device_id(self) -> str:
        return self.store.device_id

    def ref(self, label: str) -> bytes:
        return policy_ref_for(label, self.device_id)

    def _fault(self, point: str) -> None:
        if self.fault is not None:
            self.fault(point)

    # symbols and policies

    def symbols(self, counter_name: Optional[bytes] = None, window_end_ms: int = 0) -> dict:
        st = self.store
        if counter_name is None:
            nv = st.nv.get(self.counter_index)
            counter_name = nv.name if nv is not None else self.counter.name
        syms = {
            "ra": KeySymbol(self.ra.ra_key_name, self.ra.ra_public),
            "platform_pcrs": DigestSymbol(pcr_composite_digest(st, (0,))),
            "counter": NvSymbol(self.counter_index, counter_name),
            "window": ValueSymbol(window_end_ms),
        }
        if self.pin is not None:
            syms["pin"] = NvSymbol(self.pin.nv_index, self.pin.name)
        if self.puk is not None:
            syms["puk"] = NvSymbol(self.puk.nv_index, self.puk.name)
        return syms

    def _suffix(self) -> bytes:
        return b":" + self.device_id.encode()

    def signing_policy(self, revocable: bool, window_end_ms: int = 0) -> CompiledPolicy:
        ast = eid_policy_ast(self.max_attempts, revocable)
        return compile_policy(ast, self.symbols(window_end_ms=window_end_ms), self._suffix())

    def reset_policy(self, counter_name: Optional[bytes] = None) -> CompiledPolicy:
        return compile_policy(counter_reset_ast(self.max_attempts), self.symbols(counter_name), self._suffix())

    # provisioning

    def _check_pin(self, pin: bytearray) -> None:
        lo, hi = self.pin_length
        if not lo <= len(pin) <= hi or not bytes(pin).isdigit():
            raise EidError("pin_policy", "PIN must be %d to %d digits" % (lo, hi))

    def _define(self, index, size, attrs, auth_value=b"", auth_policy=b""):
        try:
            return nv_define_space(self.store, index, size, attrs, auth_value, auth_policy,
                                   platform_auth=self.platform_auth)
        except TpmError as e:
            raise EidError("index_in_use" if e.reason == "nv_defined" else e.reason, hex(index), e) from e

    def provision_pin(self, pin) -> PinRecord:
        buf = _secret_buffer(pin)
        try:
            self._check_pin(buf)
            name = self._define(self.pin_index, 0, SECRET_ATTRIBUTES, bytes(buf))
        finally:
            _wipe(buf)
        self.pin = PinRecord(self.pin_index, name)
        return self.pin

    def provision_puk(self, random=None) -> Tuple[PukRecord, str]:
        """Create the PUK index. The PUK text is returned once and also kept
        as pending until :meth:`take_pending_puk` hands it out."""
        raw = (random or self.store.random)(PUK_BYTES)
        puk = raw.hex()
        name = self._define(self.puk_index, 0, SECRET_ATTRIBUTES, puk.encode())
        self.puk = PukRecord(self.puk_index, name)
        self.pending_puk = puk
        return self.puk, puk

    def take_pending_puk(self) -> str:
        puk, self.pending_puk = self.pending_puk, None
        if puk is None:
            raise EidError("puk_already_shown")
        return puk

    def _counter_name(self, auth_policy: bytes) -> bytes:
        return crypto.compute_object_name(nv_public_area(self.counter_index, 8, COUNTER_ATTRIBUTES, auth_policy))

    def provision_counter(self) -> CounterRecord:
        if self.pin is None or self.puk is None:
            raise EidError("not_provisioned", "PIN and PUK must exist before the counter")
        # the trailing authorize makes the counter's policy independent of its own name
        draft = self.reset_policy(counter_name=bytes(34))
        name = self._counter_name(draft.trial_digest)
        compiled = self.reset_policy(counter_name=name)
        assert compiled.trial_digest == draft.trial_digest
        self._define(self.counter_index, 8, COUNTER_ATTRIBUTES, b"", compiled.trial_digest)
        rec = CounterRecord(self.counter_index, name, compiled.trial_digest, self.max_attempts)
        for step in compiled.authorizations():
            label = step.args["policy_ref"].split(b":")[0].decode()
            rec.licenses[label] = self.ra.issue_license(step.before, step.args["policy_ref"], self.device_id)
        self.counter = rec
        return rec

    def provision(self, pin) -> str:
        """PIN, PUK and counter in one go. Returns the PUK text."""
        self.provision_pin(pin)
        _, puk = self.provision_puk()
        self.provision_counter()
        return puk

    def relicense_platform(self) -> None:
        """Ask the RA to approve the current PCR state (after a firmware update)."""
        plan = self.reset_policy()
        step = plan.find("authorize", policy_ref=self.ref("platform"))[0]
        lic = self.ra.issue_license(step.before, step.args["policy_ref"], self.device_id)
        self.counter.licenses["platform"] = lic
        for cred in self.credentials.values():
            cred.licenses["platform"] = lic

    # enrolment

    def enroll_key(self, revocable: bool = True, window_ms: int = DEFAULT_WINDOW_MS) -> EidCredential:
        if self.pin is None or self.counter is None:
            raise EidError("not_provisioned", "provision PIN, PUK and counter first")
        if self.counter_index not in self.store.nv:
            raise EidError("counter_missing")
        now = clock_read(self.store)
        window_end = now + window_ms if revocable else None
        compiled = self.signing_policy(revocable, window_end or 0)
        handle, creation, name = create_key(self.store, compiled.trial_digest)
        key = self.store.keys[handle]
        final = "revocation" if revocable else "pinentry"
        try:
            rec = self.ra.enroll(self.device_id, key.public_key, name, creation,
                                 self.ra.eid_auth_policy(self.device_id, final), now)
        except RaError:
            del self.store.keys[handle]
            raise
        licenses = {}
        for step in compiled.authorizations():
            ref = step.args["policy_ref"]
            label = ref.split(b":")[0].decode()
            if label == "revocation":
                timer = compiled.find("timer")[0]
                licenses[label] = self.ra.issue_time_license(timer.before, ref, window_end, now, self.device_id)
            else:
                licenses[label] = self.ra.issue_license(step.before, ref, self.device_id)
        cred = EidCredential(handle, name, rec.certificate, self.pin.nv_index, self.counter_index,
                             self.puk.nv_index, licenses, self.max_attempts, revocable, window_end)
        self.credentials[cred.cred_id] = cred
        return cred

    def credential(self, cred_id: Optional[str] = None) -> EidCredential:
        if cred_id is None:
            if len(self.credentials) != 1:
                raise EidError("credential_ambiguous" if self.credentials else "no_credential")
            return next(iter(self.credentials.values()))
        try:
            return self.credentials[cred_id]
        except KeyError:
            raise EidError("no_credential", cred_id) from None

    # counter

    def counter_value(self) -> int:
        if self.counter_index not in self.store.nv:
            raise EidError("counter_missing", "counter index absent; run repair")
        return nv_read_counter(self.store, self.counter_index)

    def attempts_remaining(self) -> int:
        return max(0, self.max_attempts - self.counter_value())

    def _precheck(self) -> int:
        n = self.counter_value()
        if n >= self.max_attempts:
            raise EidError("attempts_exhausted", "reset the counter with the PUK", remaining_attempts=0)
        return n

    def _map_error(self, e: TpmError, wrong: str) -> EidError:
        if e.reason == "secret_mismatch":
            if wrong == "wrong_pin":
                left = self.attempts_remaining()
                return EidError(wrong, "%d attempts remaining" % left, e, remaining_attempts=left)
            return EidError(wrong, "", e)
        if e.reason in ("policy_not_authorized", "invalid_ticket", "key_name_mismatch", "bad_signature"):
            return EidError("license_rejected", e.command, e)
        return EidError(e.reason, e.detail, e)

    def _run(self, compiled: CompiledPolicy, secret_index: int, secret: bytearray, licenses, wrong: str) -> int:
        h = engine.start_auth_session(self.store, engine.POLICY)
        runner = _HelperRunner(self, h, secret_index, secrets={secret_index: secret},
                               licenses={lic.policy_ref: lic for lic in licenses.values()})
        try:
            runner.run(compiled.plan)
        except TpmError as e:
            engine.flush_session(self.store, h)
            raise self._map_error(e, wrong) from e
        except MissingAuthorization as e:
            engine.flush_session(self.store, h)
            raise EidError("license_missing", bytes(e.args[0]).decode(errors="replace")) from None
        except EidError:
            engine.flush_session(self.store, h)
            raise
        return h

    def _reset_counter(self, secret_index: int, secret: bytearray, wrong: str) -> None:
        h = self._run(self.reset_policy(), secret_index, secret, self.counter.licenses, wrong)
        try:
            nv_undefine_space(self.store, self.counter_index, PolicyAuth(h))
        except TpmError as e:
            raise self._map_error(e, wrong) from e
        self._fault("after_undefine")
        self._define(self.counter_index, 8, COUNTER_ATTRIBUTES, b"", self.counter.auth_policy)

    def reset_counter_with_puk(self, puk) -> None:
        if self.counter is None:
            raise EidError("not_provisioned")
        buf = _secret_buffer(puk)
        try:
            self.counter_value()
            self._reset_counter(self.puk_index, buf, "wrong_puk")
        finally:
            _wipe(buf)

    def repair_counter(self, platform_auth: Optional[bytes] = None) -> CounterRecord:
        """Recreate a counter lost between undefine and redefine."""
        if self.counter is None:
            raise EidError("not_provisioned")
        if self.counter_index in self.store.nv:
            raise EidError("counter_present")
        try:
            nv_define_space(self.store, self.counter_index, 8, COUNTER_ATTRIBUTES, b"", self.counter.auth_policy,
                            platform_auth=platform_auth if platform_auth is not None else self.platform_auth)
        except TpmError as e:
            raise EidError(e.reason, "", e) from e
        return self.counter

    # use

    def sign_with_pin(self, credential: EidCredential, pin, message_digest: bytes) -> bytes:
        buf = _secret_buffer(pin)
        try:
            self._precheck()
            now = clock_read(self.store)
            if credential.revocable and now >= credential.window_end_ms:
                # the in-policy timer would fail too, but only after an attempt is consumed
                raise EidError("timer_assertion_failed", "clock %d past window end %d; refresh the license"
                               % (now, credential.window_end_ms), clock_ms=now)
            compiled = self.signing_policy(credential.revocable, credential.window_end_ms or 0)
            h = self._run(compiled, credential.pin_index, buf, credential.licenses, "wrong_pin")
            try:
                sig = engine.sign_gated(self.store, credential.key_handle, message_digest, h)
            except TpmError as e:
                raise self._map_error(e, "wrong_pin") from e
            self._reset_counter(credential.pin_index, buf, "wrong_pin")
            return sig
        finally:
            _wipe(buf)

    def change_pin(self, old_pin, new_pin) -> None:
        """Recreate the PIN index with a new authValue. Its name is unchanged,
        so every credential bound to it keeps working.

        The attempt is counted against the retry counter like a signature.
        """
        old, new = _secret_buffer(old_pin), _secret_buffer(new_pin)
        try:
            self._check_pin(new)
            self._precheck()
            nv_increment(self.store, self.counter_index)
            try:
                nv_undefine_space(self.store, self.pin_index, bytes(old))
            except TpmError as e:
                if e.reason != "auth_value_mismatch":
                    raise EidError(e.reason, "", e) from e
                left = self.attempts_remaining()
                raise EidError("wrong_pin", "%d attempts remaining" % left, e, remaining_attempts=left) from e
            name = self._define(self.pin_index, 0, SECRET_ATTRIBUTES, bytes(new))
            assert name == self.pin.name
            self._reset_counter(self.pin_index, new, "wrong_pin")
        finally:
            _wipe(old)
            _wipe(new)

    def refresh_revocation_license(self, credential: EidCredential, window_ms: int) -> AuthorizationLicense:
        if not credential.revocable:
            raise EidError("not_revocable", credential.cred_id)
        now = clock_read(self.store)
        window_end = now + window_ms
        compiled = self.signing_policy(True, window_end)
        timer = compiled.find("timer")[0]
        try:
            lic = self.ra.refresh_time_license(credential.cred_id, timer.before, self.ref("revocation"),
                                               window_end, now)
        except RaError as e:
            raise EidError(e.reason, e.detail) from e
        credential.licenses["revocation"] = lic
        credential.window_end_ms = window_end
        return lic

    # persistence

    def to_json(self) -> dict:
        c = self.counter
        return {
            "deviceId": self.device_id,
            "maxAttempts": self.max_attempts,
            "pinLength": list(self.pin_length),
            "indices": {"counter": self.counter_index, "pin": self.pin_index, "puk": self.puk_index},
            "pin": None if self.pin is None else {"index": self.pin.nv_index, "name": self.pin.name.hex()},
            "puk": None if self.puk is None else {"index": self.puk.nv_index, "name": self.puk.name.hex()},
            "counter": None if c is None else {
                "index": c.nv_index,
                "name": c.name.hex(),
                "authPolicy": c.auth_policy.hex(),
                "maxAttempts": c.max_attempts,
                "licenses": {k: v.to_json() for k, v in sorted(c.licenses.items())},
            },
            "credentials": [self.credentials[k].to_json() for k in sorted(self.credentials)],
            "pendingPuk": self.pending_puk,
            "platformAuth": None if self.platform_auth is None else self.platform_auth.hex(),
        }

    @classmethod
    def from_json(cls, store: TpmStore, ra: RegistrationAuthority, d: dict) -> "EidHelper":
        try:
            ix = d["indices"]
            h = cls(store, ra, d["maxAttempts"], tuple(d["pinLength"]), ix["counter"], ix["pin"], ix["puk"])
            if d["deviceId"] != store.device_id:
                raise StateFileError("wallet belongs to device %s" % d["deviceId"])
            if d["pin"]:
                h.pin = PinRecord(d["pin"]["index"], bytes.fromhex(d["pin"]["name"]))
            if d["puk"]:
                h.puk = PukRecord(d["puk"]["index"], bytes.fromhex(d["puk"]["name"]))
            c = d["counter"]
            if c:
                h.counter = CounterRecord(
                    c["index"], bytes.fromhex(c["name"]), bytes.fromhex(c["authPolicy"]), c["maxAttempts"],
                    {k: AuthorizationLicense.from_json(v) for k, v in c["licenses"].items()})
            for item in d["credentials"]:
                cred = EidCredential.from_json(item)
                h.credentials[cred.cred_id] = cred
            h.pending_puk = d["pendingPuk"]
            if d.get("platformAuth") is not None:
                h.platform_auth = bytes.fromhex(d["platformAuth"])
        except (KeyError, TypeError, ValueError) as e:
            raise StateFileError("malformed wallet body (%s)" % e) from None
        return h

    def save(self, path) -> None:
        write_container(path, WALLET_KIND, self.to_json())

    @classmethod
    def load(cls, store: TpmStore, ra: RegistrationAuthority, path) -> "EidHelper":
        return cls.from_json(store, ra, read_container(path, WALLET_KIND))


def save_bundle(credential: EidCredential, path) -> None:
    """Credential bundle: certificate, licenses and index references. No secrets."""
    write_container(path, BUNDLE_KIND, credential.to_json())


def load_bundle(path) -> EidCredential:
    return EidCredential.from_json(read_container(path, BUNDLE_KIND))
