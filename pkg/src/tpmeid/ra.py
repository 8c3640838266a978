"""Registration authority and toy CA.

The RA signs policy authorizations ("licenses") that the device later turns
into tickets with VerifySignature and consumes with PolicyAuthorize. A license
signs H(approvedDigest || policyRef). The CA half issues minimal certificates
for enrolled keys. The two roles live in one object but use separate keys.

Enrolment attestation is a stub. The RA trusts the creation data the device
reports and only checks that its authPolicy is the one the RA expects and that
the key name is consistent with it.
"""
import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

from . import crypto, engine
from .constants import CC
from .errors import RaError, StateFileError
from .store import CreationData, KeyAttributes, external_key_name, key_public_area, read_container, write_container

CERT_VALIDITY_MS = 365 * 24 * 3600 * 1000
TPM_RESIDENT = "tpm_resident"
REGISTRY_KIND = "ra-registry"
LICENSE_KIND = "ra-license"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def policy_ref_for(label: str, device_id: str) -> bytes:
    """Per-device policyRef: class label, a colon, then the device id."""
    return label.encode() + b":" + device_id.encode()


def credential_id(key_name: bytes) -> str:
    return key_name[2:10].hex()


@dataclass(frozen=True)
class AuthorizationLicense:
    approved_digest: bytes
    policy_ref: bytes
    signature: bytes
    ra_key_name: bytes
    device_id: str = ""
    not_after_ms: Optional[int] = None

    @property
    def message(self) -> bytes:
        return engine.authorization_message(self.approved_digest, self.policy_ref)

    def verify(self, ra_public: bytes, scheme: str = crypto.SCHEME_ED25519) -> bool:
        return (external_key_name(ra_public, scheme) == self.ra_key_name
                and crypto.verify(ra_public, self.message, self.signature, scheme))

    def to_json(self) -> dict:
        return {
            "approvedDigest": self.approved_digest.hex(),
            "policyRef": self.policy_ref.hex(),
            "signature": self.signature.hex(),
            "raKeyName": self.ra_key_name.hex(),
            "deviceId": self.device_id,
            "notAfterMs": self.not_after_ms,
        }

    @classmethod
    def from_json(cls, d) -> "AuthorizationLicense":
        return cls(
            bytes.fromhex(d["approvedDigest"]),
            bytes.fromhex(d["policyRef"]),
            bytes.fromhex(d["signature"]),
            bytes.fromhex(d["raKeyName"]),
            d.get("deviceId", ""),
            d.get("notAfterMs"),
        )


@dataclass(frozen=True)
class Certificate:
    """Minimal signed record. The signature covers the canonical JSON of
    every other field (sorted keys, no whitespace)."""
    serial: int
    issuer: str
    subject: str
    public_key: bytes
    scheme: str
    key_name: bytes
    not_before_ms: int
    not_after_ms: int
    extensions: Tuple[Tuple[str, str], ...]
    signature: bytes = b""

    def tbs(self) -> bytes:
        d = self.to_json()
        del d["signature"]
        return _canonical(d)

    @property
    def tpm_resident(self) -> bool:
        return dict(self.extensions).get(TPM_RESIDENT) == "true"

    def verify(self, ca_public: bytes, scheme: str = crypto.SCHEME_ED25519) -> bool:
        return crypto.verify(ca_public, self.tbs(), self.signature, scheme)

    def to_json(self) -> dict:
        return {
            "serial": self.serial,
            "issuer": self.issuer,
            "subject": self.subject,
            "publicKey": self.public_key.hex(),
            "scheme": self.scheme,
            "keyName": self.key_name.hex(),
            "notBeforeMs": self.not_before_ms,
            "notAfterMs": self.not_after_ms,
            "extensions": {k: v for k, v in self.extensions},
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_json(cls, d) -> "Certificate":
        return cls(
            d["serial"], d["issuer"], d["subject"], bytes.fromhex(d["publicKey"]), d["scheme"],
            bytes.fromhex(d["keyName"]), d["notBeforeMs"], d["notAfterMs"],
            tuple(sorted(d["extensions"].items())), bytes.fromhex(d["signature"]),
        )


@dataclass
class EnrollmentRecord:
    device_id: str
    key_name: bytes
    creation_data: CreationData
    certificate: Certificate
    revoked: bool = False

    @property
    def cred_id(self) -> str:
        return credential_id(self.key_name)

    def to_json(self) -> dict:
        return {
            "deviceId": self.device_id,
            "keyName": self.key_name.hex(),
            "creationData": self.creation_data.to_json(),
            "certificate": self.certificate.to_json(),
            "revoked": self.revoked,
        }

    @classmethod
    def from_json(cls, d) -> "EnrollmentRecord":
        return cls(d["deviceId"], bytes.fromhex(d["keyName"]), CreationData.from_json(d["creationData"]),
                   Certificate.from_json(d["certificate"]), d["revoked"])


@dataclass
class RegistrationAuthority:
    ra_key: crypto.SignatureKeyPair = field(repr=False)
    ca_key: crypto.SignatureKeyPair = field(repr=False)
    name: str = "toy-ra"
    licenses: Dict[Tuple[str, bytes, bytes], AuthorizationLicense] = field(default_factory=dict)
    enrollments: Dict[str, EnrollmentRecord] = field(default_factory=dict)
    next_serial: int = 1

    @classmethod
    def generate(cls, random: crypto.RandomSource = os.urandom, name: str = "toy-ra") -> "RegistrationAuthority":
        return cls(crypto.generate_keypair(random), crypto.generate_keypair(random), name)

    @property
    def ra_public(self) -> bytes:
        return self.ra_key.public

    @property
    def ca_public(self) -> bytes:
        return self.ca_key.public

    @property
    def ra_key_name(self) -> bytes:
        return external_key_name(self.ra_key.public, self.ra_key.scheme)

    # licenses

    def issue_license(self, approved_digest: bytes, policy_ref: bytes, device_id: str = "",
                      not_after_ms: Optional[int] = None) -> AuthorizationLicense:
        if not policy_ref:
            raise RaError("empty_policy_ref")
        if len(approved_digest) != crypto.DIGEST_SIZE:
            raise RaError("bad_digest_size", str(len(approved_digest)))
        key = (device_id, bytes(policy_ref), bytes(approved_digest))
        lic = self.licenses.get(key)
        if lic is not None and lic.not_after_ms == not_after_ms:
            return lic
        message = engine.authorization_message(approved_digest, policy_ref)
        lic = AuthorizationLicense(bytes(approved_digest), bytes(policy_ref), crypto.sign(self.ra_key, message),
                                   self.ra_key_name, device_id, not_after_ms)
        self.licenses[key] = lic
        return lic

    def issue_time_license(self, base_digest: bytes, policy_ref: bytes, window_end_ms: int, now_ms: int,
                           device_id: str = "") -> AuthorizationLicense:
        """License the chain `base_digest` + PolicyCounterTimer(clock < window_end_ms)."""
        if window_end_ms <= now_ms:
            raise RaError("window_in_past", "%d <= %d" % (window_end_ms, now_ms))
        approved = engine.counter_timer_update(base_digest, window_end_ms, "lt")
        return self.issue_license(approved, policy_ref, device_id, window_end_ms)

    def refresh_time_license(self, cred_id: str, base_digest: bytes, policy_ref: bytes, window_end_ms: int,
                             now_ms: int) -> AuthorizationLicense:
        rec = self.enrollments.get(cred_id)
        if rec is None:
            raise RaError("unknown_credential", cred_id)
        if rec.revoked:
            raise RaError("credential_revoked", cred_id)
        return self.issue_time_license(base_digest, policy_ref, window_end_ms, now_ms, rec.device_id)

    # enrolment

    def eid_auth_policy(self, device_id: str, final_label: str) -> bytes:
        """authPolicy every eID key must carry: the last normalization step plus CC_Sign."""
        return engine.command_code_update(
            engine.authorize_update(self.ra_key_name, policy_ref_for(final_label, device_id)), CC.Sign)

    def enroll(self, device_id: str, public_key: bytes, key_name: bytes, creation_data: CreationData,
               expected_auth_policy: bytes, now_ms: int = 0, scheme: str = crypto.SCHEME_ED25519,
               subject: Optional[str] = None) -> EnrollmentRecord:
        if not crypto.constant_time_eq(creation_data.auth_policy, expected_auth_policy):
            raise RaError("auth_policy_mismatch")
        area = key_public_area(public_key, scheme, KeyAttributes(), expected_auth_policy)
        if crypto.compute_object_name(area) != key_name:
            raise RaError("name_mismatch")
        cred_id = credential_id(key_name)
        if cred_id in self.enrollments:
            raise RaError("already_enrolled", cred_id)
        cert = Certificate(
            serial=self.next_serial,
            issuer=self.name,
            subject=subject or "eid:%s:%s" % (device_id, cred_id),
            public_key=bytes(public_key),
            scheme=scheme,
            key_name=bytes(key_name),
            not_before_ms=now_ms,
            not_after_ms=now_ms + CERT_VALIDITY_MS,
            extensions=((TPM_RESIDENT, "true"),),
        )
        cert = dataclasses.replace(cert, signature=crypto.sign(self.ca_key, cert.tbs()))
        self.next_serial += 1
        rec = EnrollmentRecord(device_id, bytes(key_name), creation_data, cert)
        self.enrollments[cred_id] = rec
        return rec

    def revoke(self, cred_id: str) -> None:
        rec = self.enrollments.get(cred_id)
        if rec is None:
            raise RaError("unknown_credential", cred_id)
        rec.revoked = True

    def is_revoked(self, cred_id: str) -> bool:
        rec = self.enrollments.get(cred_id)
        return rec is not None and rec.revoked

    # persistence

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "raKey": {"public": self.ra_key.public.hex(), "private": self.ra_key.private.hex()},
            "caKey": {"public": self.ca_key.public.hex(), "private": self.ca_key.private.hex()},
            "nextSerial": self.next_serial,
            "licenses": [lic.to_json() for _, lic in sorted(self.licenses.items(), key=lambda kv: kv[0])],
            "enrollments": [self.enrollments[k].to_json() for k in sorted(self.enrollments)],
        }

    @classmethod
    def from_json(cls, d) -> "RegistrationAuthority":
        def pair(k):
            return crypto.SignatureKeyPair(bytes.fromhex(k["public"]), bytes.fromhex(k["private"]))

        ra = cls(pair(d["raKey"]), pair(d["caKey"]), d["name"], next_serial=d["nextSerial"])
        for item in d["licenses"]:
            lic = AuthorizationLicense.from_json(item)
            ra.licenses[(lic.device_id, lic.policy_ref, lic.approved_digest)] = lic
        for item in d["enrollments"]:
            rec = EnrollmentRecord.from_json(item)
            ra.enrollments[rec.cred_id] = rec
        return ra

    def save(self, path) -> None:
        write_container(path, REGISTRY_KIND, self.to_json())

    @classmethod
    def load(cls, path) -> "RegistrationAuthority":
        body = read_container(path, REGISTRY_KIND)
        try:
            return cls.from_json(body)
        except (KeyError, TypeError, ValueError) as e:
            raise StateFileError("malformed registry body (%s)" % e) from None


def save_license(lic: AuthorizationLicense, path) -> None:
    write_container(path, LICENSE_KIND, lic.to_json())


def load_license(path) -> AuthorizationLicense:
    return AuthorizationLicense.from_json(read_container(path, LICENSE_KIND))
