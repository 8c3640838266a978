"""The simulated TPM's world: keys, NV indices, PCR bank, clock.

The store is a single exclusively-owned value. Every command takes the store's
lock, which makes it behave like a TPM's serial command processor. Policy
sessions live in ``store.sessions``, but the engine module owns them. They are
volatile and never persisted.

Public areas are serialized with :func:`tpmeid.crypto.encode_fields` (u32
length prefix per field) in the field order documented in ``docs/state-file.md``.
"""
import functools
import json
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

from . import crypto
from .constants import (
    CC,
    EXTERNAL_HANDLE_BASE,
    KEY_HANDLE_BASE,
    PCR_COUNT,
    PCR_SELECT_BYTES,
    TPM_ALG_SHA256,
)
from .crypto import ZERO_DIGEST
from .errors import StateFileError, TpmError

STATE_MAGIC = "TPM2EA"
STATE_VERSION = 1
DEFAULT_CLOCK_PERSIST_INTERVAL_MS = 60000
DEFAULT_SESSION_CAP = 64


@dataclass(frozen=True)
class KeyAttributes:
    sign: bool = True
    fixed_to_store: bool = True

    def bits(self) -> int:
        return (self.sign << 0) | (self.fixed_to_store << 1)


@dataclass(frozen=True)
class NvAttributes:
    is_counter: bool = False
    written_once: bool = False
    open_increment: bool = False
    open_read: bool = False
    policy_delete: bool = False

    def bits(self) -> int:
        return (
            (self.is_counter << 0)
            | (self.written_once << 1)
            | (self.open_increment << 2)
            | (self.open_read << 3)
            | (self.policy_delete << 4)
        )

    @classmethod
    def from_bits(cls, bits: int) -> "NvAttributes":
        return cls(*(bool(bits >> i & 1) for i in range(5)))


def key_public_area(public_key: bytes, scheme: str, attributes: KeyAttributes, auth_policy: bytes) -> bytes:
    return crypto.encode_fields(
        b"KEY",
        struct.pack(">H", crypto.SCHEME_IDS[scheme]),
        struct.pack(">H", TPM_ALG_SHA256),
        struct.pack(">I", attributes.bits()),
        auth_policy,
        public_key,
    )


def external_key_name(public_key: bytes, scheme: str = crypto.SCHEME_ED25519) -> bytes:
    """Name of a bare public key as loaded by TPM2_LoadExternal."""
    return crypto.compute_object_name(key_public_area(public_key, scheme, KeyAttributes(True, False), b""))


def nv_public_area(index: int, size: int, attributes: NvAttributes, auth_policy: bytes) -> bytes:
    # authValue and data are deliberately not part of the public area
    return crypto.encode_fields(
        b"NV",
        struct.pack(">I", index),
        struct.pack(">H", TPM_ALG_SHA256),
        struct.pack(">I", attributes.bits()),
        auth_policy,
        struct.pack(">H", size),
    )


@dataclass
class CreationData:
    pcr_select: tuple
    pcr_digest: bytes
    auth_policy: bytes

    def to_json(self):
        return {
            "pcrSelect": list(self.pcr_select),
            "pcrDigest": self.pcr_digest.hex(),
            "authPolicy": self.auth_policy.hex(),
        }

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["pcrSelect"]), bytes.fromhex(d["pcrDigest"]), bytes.fromhex(d["authPolicy"]))


@dataclass
class KeyObject:
    handle: int
    public_key: bytes
    private_key: bytes = field(repr=False)
    auth_value: bytes = field(repr=False)
    auth_policy: bytes
    attributes: KeyAttributes
    creation_data: CreationData
    scheme: str = crypto.SCHEME_ED25519

    @property
    def public_area(self) -> bytes:
        return key_public_area(self.public_key, self.scheme, self.attributes, self.auth_policy)

    @property
    def name(self) -> bytes:
        return crypto.compute_object_name(self.public_area)

    def keypair(self) -> crypto.SignatureKeyPair:
        return crypto.SignatureKeyPair(self.public_key, self.private_key, self.scheme)


@dataclass
class NvIndex:
    index: int
    size: int
    attributes: NvAttributes
    auth_value: bytes = field(repr=False)
    auth_policy: bytes
    data: bytes

    @property
    def public_area(self) -> bytes:
        return nv_public_area(self.index, self.size, self.attributes, self.auth_policy)

    @property
    def name(self) -> bytes:
        return crypto.compute_object_name(self.public_area)

    @property
    def counter_value(self) -> int:
        return int.from_bytes(self.data, "big")


@dataclass
class ExternalKey:
    handle: int
    public_key: bytes
    scheme: str = crypto.SCHEME_ED25519

    @property
    def name(self) -> bytes:
        return external_key_name(self.public_key, self.scheme)


@dataclass
class PcrBank:
    pcrs: list = field(default_factory=lambda: [ZERO_DIGEST] * PCR_COUNT)
    update_counter: int = 0


@dataclass
class ClockState:
    ms: int = 0
    last_persisted_at: int = 0


@dataclass
class PolicyAuth:
    """Authorize a command with a policy session (plus authValue if it demands one)."""
    session: int
    auth_value: Optional[bytes] = field(default=None, repr=False)


Authorization = Union[None, bytes, PolicyAuth]


@dataclass
class TpmStore:
    device_id: str
    proof_value: bytes = field(repr=False)
    keys: Dict[int, KeyObject] = field(default_factory=dict)
    nv: Dict[int, NvIndex] = field(default_factory=dict)
    pcr_bank: PcrBank = field(default_factory=PcrBank)
    clock: ClockState = field(default_factory=ClockState)
    loaded_external: Dict[int, ExternalKey] = field(default_factory=dict)
    sessions: dict = field(default_factory=dict)
    next_key_handle: int = KEY_HANDLE_BASE
    next_external_handle: int = EXTERNAL_HANDLE_BASE
    next_session: int = 0
    clock_persist_interval_ms: int = DEFAULT_CLOCK_PERSIST_INTERVAL_MS
    session_cap: int = DEFAULT_SESSION_CAP
    # NV (re)creation authorization; None means open, the worst case
    platform_auth: Optional[bytes] = field(default=None, repr=False)
    random: crypto.RandomSource = field(default=os.urandom, repr=False, compare=False)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)


def new_store(random: crypto.RandomSource = os.urandom, **config) -> TpmStore:
    return TpmStore(device_id=random(8).hex(), proof_value=random(32), random=random, **config)


def _serial(fn):
    @functools.wraps(fn)
    def wrapper(store, *args, **kwargs):
        with store.lock:
            return fn(store, *args, **kwargs)
    return wrapper


def _fail(command, reason, detail=""):
    raise TpmError("command", command, reason, detail)


# PCRs

def pcr_select_bytes(pcr_select: Sequence[int]) -> bytes:
    """TPML_PCR_SELECTION with one SHA-256 bank, as hashed by PolicyPCR."""
    bitmap = bytearray(PCR_SELECT_BYTES)
    for i in pcr_select:
        if not 0 <= i < PCR_COUNT:
            raise ValueError("PCR index %d out of range" % i)
        bitmap[i // 8] |= 1 << (i % 8)
    return struct.pack(">IHB", 1, TPM_ALG_SHA256, PCR_SELECT_BYTES) + bytes(bitmap)


def pcr_composite_digest(store: TpmStore, pcr_select: Sequence[int]) -> bytes:
    """Hash of the selected PCR values, concatenated in ascending index order."""
    return crypto.hash(b"".join(store.pcr_bank.pcrs[i] for i in sorted(set(pcr_select))))


@_serial
def pcr_extend(store: TpmStore, pcr_index: int, measurement: bytes) -> bytes:
    if not 0 <= pcr_index < len(store.pcr_bank.pcrs):
        _fail("PCR_Extend", "pcr_index_out_of_range", str(pcr_index))
    if len(measurement) != crypto.DIGEST_SIZE:
        _fail("PCR_Extend", "bad_measurement_size", str(len(measurement)))
    bank = store.pcr_bank
    bank.pcrs[pcr_index] = crypto.extend(bank.pcrs[pcr_index], measurement)
    bank.update_counter += 1
    return bank.pcrs[pcr_index]


@_serial
def startup_clear(store: TpmStore) -> None:
    """Simulated TPM2_Startup(CLEAR): PCR values back to zero, sessions and
    loaded external keys dropped. The PCR update counter is left alone; it
    only ever moves on pcr_extend.
    """
    store.pcr_bank.pcrs = [ZERO_DIGEST] * len(store.pcr_bank.pcrs)
    store.sessions.clear()
    store.loaded_external.clear()


# NV

@_serial
def nv_define_space(
    store: TpmStore,
    index: int,
    size: int,
    attributes: NvAttributes,
    auth_value: bytes = b"",
    auth_policy: bytes = b"",
    platform_auth: Optional[bytes] = None,
) -> bytes:
    if store.platform_auth is not None and (
        platform_auth is None or not crypto.constant_time_eq(platform_auth, store.platform_auth)
    ):
        _fail("NV_DefineSpace", "platform_auth_required")
    if index in store.nv:
        _fail("NV_DefineSpace", "nv_defined", hex(index))
    if attributes.is_counter and size != 8:
        _fail("NV_DefineSpace", "bad_counter_size", str(size))
    nv = NvIndex(index, size, attributes, bytes(auth_value), bytes(auth_policy), bytes(size))
    store.nv[index] = nv
    return nv.name


def _get_nv(store, index, command) -> NvIndex:
    try:
        return store.nv[index]
    except KeyError:
        _fail(command, "no_such_nv_index", hex(index))


def _authorize(store, target, authorization, cc, command, message=b""):
    if isinstance(authorization, PolicyAuth):
        from .engine import gate  # engine depends on this module

        gate(store, authorization.session, cc, target, authorization.auth_value, message)
        return
    if authorization is None:
        _fail(command, "authorization_required")
    if not crypto.constant_time_eq(bytes(authorization), target.auth_value):
        _fail(command, "auth_value_mismatch")


@_serial
def nv_undefine_space(store: TpmStore, index: int, authorization: Authorization) -> None:
    nv = _get_nv(store, index, "NV_UndefineSpace")
    if nv.attributes.policy_delete and not isinstance(authorization, PolicyAuth):
        _fail("NV_UndefineSpace", "policy_required")
    _authorize(store, nv, authorization, CC.NV_UndefineSpace, "NV_UndefineSpace")
    del store.nv[index]


@_serial
def nv_increment(store: TpmStore, index: int, authorization: Authorization = None) -> int:
    nv = _get_nv(store, index, "NV_Increment")
    if not nv.attributes.is_counter:
        _fail("NV_Increment", "not_a_counter", hex(index))
    if not (nv.attributes.open_increment and authorization is None):
        _authorize(store, nv, authorization, CC.NV_Increment, "NV_Increment")
    value = nv.counter_value + 1
    nv.data = value.to_bytes(8, "big")
    return value


@_serial
def nv_read(store: TpmStore, index: int, authorization: Authorization = None) -> bytes:
    nv = _get_nv(store, index, "NV_Read")
    if not (nv.attributes.open_read and authorization is None):
        _authorize(store, nv, authorization, CC.NV_Read, "NV_Read")
    return nv.data


def nv_read_counter(store: TpmStore, index: int, authorization: Authorization = None) -> int:
    return int.from_bytes(nv_read(store, index, authorization), "big")


# keys

@_serial
def create_key(
    store: TpmStore,
    auth_policy: bytes,
    auth_value: bytes = b"",
    attributes: KeyAttributes = KeyAttributes(),
    pcr_select: Sequence[int] = (0,),
):
    """TPM2_Create for a signing key. Returns (handle, creation data, name)."""
    pair = crypto.generate_keypair(store.random)
    creation = CreationData(
        tuple(sorted(set(pcr_select))),
        pcr_composite_digest(store, pcr_select),
        bytes(auth_policy),
    )
    handle = store.next_key_handle
    store.next_key_handle += 1
    key = KeyObject(handle, pair.public, pair.private, bytes(auth_value), bytes(auth_policy),
                    attributes, creation)
    store.keys[handle] = key
    return handle, creation, key.name


def get_key(store: TpmStore, handle: int, command: str = "Sign") -> KeyObject:
    try:
        return store.keys[handle]
    except KeyError:
        _fail(command, "no_such_key", hex(handle))


@_serial
def load_external(store: TpmStore, public_key: bytes, scheme: str = crypto.SCHEME_ED25519) -> int:
    try:
        crypto.check_public_key(public_key, scheme)
    except ValueError as e:
        _fail("LoadExternal", "malformed_key", str(e))
    handle = store.next_external_handle
    store.next_external_handle += 1
    store.loaded_external[handle] = ExternalKey(handle, bytes(public_key), scheme)
    return handle


# clock

def clock_read(store: TpmStore) -> int:
    return store.clock.ms


@_serial
def clock_advance(store: TpmStore, delta_ms: int) -> int:
    if delta_ms < 0:
        raise ValueError("clock cannot go backwards")
    c = store.clock
    c.ms += delta_ms
    if c.ms - c.last_persisted_at >= store.clock_persist_interval_ms:
        c.last_persisted_at = c.ms
    return c.ms


# persistence

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_container(path, kind: str, body: dict) -> None:
    doc = {
        "magic": STATE_MAGIC,
        "kind": kind,
        "version": STATE_VERSION,
        "hashAlg": crypto.HASH_ALG,
        "body": body,
        "checksum": crypto.hash(_canonical(body)).hex(),
    }
    tmp = "%s.tmp" % path
    with open(tmp, "wb") as f:
        f.write(_canonical(doc) + b"\n")
    os.replace(tmp, path)


def read_container(path, kind: str) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        doc = json.loads(raw)
        body = doc["body"]
        checksum = doc["checksum"]
        magic, version, alg, got_kind = doc["magic"], doc["version"], doc["hashAlg"], doc["kind"]
    except (ValueError, KeyError, TypeError) as e:
        raise StateFileError("%s: unreadable container (%s)" % (path, e)) from None
    if magic != STATE_MAGIC or got_kind != kind:
        raise StateFileError("%s: not a %s file" % (path, kind))
    if version != STATE_VERSION:
        raise StateFileError("%s: unsupported version %r" % (path, version))
    if alg != crypto.HASH_ALG:
        raise StateFileError("%s: unsupported hash algorithm %r" % (path, alg))
    if crypto.hash(_canonical(body)).hex() != checksum:
        raise StateFileError("%s: checksum mismatch" % path)
    return body


def store_to_json(store: TpmStore, orderly: bool = True) -> dict:
    clock_ms = store.clock.ms if orderly else store.clock.last_persisted_at
    return {
        "deviceId": store.device_id,
        "proofValue": store.proof_value.hex(),
        "keys": [
            {
                "handle": k.handle,
                "scheme": k.scheme,
                "publicKey": k.public_key.hex(),
                "privateKey": k.private_key.hex(),
                "authValue": k.auth_value.hex(),
                "authPolicy": k.auth_policy.hex(),
                "attributes": {"sign": k.attributes.sign, "fixedToStore": k.attributes.fixed_to_store},
                "creationData": k.creation_data.to_json(),
            }
            for k in sorted(store.keys.values(), key=lambda k: k.handle)
        ],
        "nv": [
            {
                "index": n.index,
                "size": n.size,
                "attributes": n.attributes.bits(),
                "authValue": n.auth_value.hex(),
                "authPolicy": n.auth_policy.hex(),
                "data": n.data.hex(),
            }
            for n in sorted(store.nv.values(), key=lambda n: n.index)
        ],
        "pcr": {
            "values": [p.hex() for p in store.pcr_bank.pcrs],
            "updateCounter": store.pcr_bank.update_counter,
        },
        "clock": {"ms": clock_ms},
        "nextKeyHandle": store.next_key_handle,
        "config": {
            "clockPersistIntervalMs": store.clock_persist_interval_ms,
            "sessionCap": store.session_cap,
            "platformAuth": None if store.platform_auth is None else store.platform_auth.hex(),
        },
    }


def store_from_json(body: dict, random: crypto.RandomSource = os.urandom) -> TpmStore:
    try:
        cfg = body["config"]
        store = TpmStore(
            device_id=body["deviceId"],
            proof_value=bytes.fromhex(body["proofValue"]),
            next_key_handle=body["nextKeyHandle"],
            clock_persist_interval_ms=cfg["clockPersistIntervalMs"],
            session_cap=cfg["sessionCap"],
            platform_auth=None if cfg["platformAuth"] is None else bytes.fromhex(cfg["platformAuth"]),
            random=random,
        )
        for k in body["keys"]:
            store.keys[k["handle"]] = KeyObject(
                handle=k["handle"],
                public_key=bytes.fromhex(k["publicKey"]),
                private_key=bytes.fromhex(k["privateKey"]),
                auth_value=bytes.fromhex(k["authValue"]),
                auth_policy=bytes.fromhex(k["authPolicy"]),
                attributes=KeyAttributes(k["attributes"]["sign"], k["attributes"]["fixedToStore"]),
                creation_data=CreationData.from_json(k["creationData"]),
                scheme=k["scheme"],
            )
        for n in body["nv"]:
            store.nv[n["index"]] = NvIndex(
                index=n["index"],
                size=n["size"],
                attributes=NvAttributes.from_bits(n["attributes"]),
                auth_value=bytes.fromhex(n["authValue"]),
                auth_policy=bytes.fromhex(n["authPolicy"]),
                data=bytes.fromhex(n["data"]),
            )
        store.pcr_bank = PcrBank([bytes.fromhex(p) for p in body["pcr"]["values"]],
                                 body["pcr"]["updateCounter"])
        ms = body["clock"]["ms"]
        store.clock = ClockState(ms, ms)
    except (KeyError, TypeError, ValueError) as e:
        raise StateFileError("malformed state body (%s)" % e) from None
    return store


def save_state(store: TpmStore, path, orderly: bool = True) -> None:
    """Write the store. `orderly=False` models power loss: only the last
    periodic clock snapshot survives."""
    with store.lock:
        write_container(path, "tpm-state", store_to_json(store, orderly))


def load_state(path, random: crypto.RandomSource = os.urandom) -> TpmStore:
    return store_from_json(read_container(path, "tpm-state"), random)
