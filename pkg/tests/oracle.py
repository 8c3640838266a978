"""Flat hash-chain oracle for EA policy digests.

Deliberately independent of the package: only hashlib and struct, literal
command codes, no shared helpers. If the package and this file disagree,
one of them has a bug.
"""
import hashlib
import struct

ZERO = bytes(32)

# TPM_CC values, written out literally
PolicyNV = 0x149
PolicySecret = 0x151
PolicyAuthorize = 0x16A
PolicyAuthValue = 0x16B
PolicyCommandCode = 0x16C
PolicyCounterTimer = 0x16D
PolicyOR = 0x171
PolicyPCR = 0x17F

CC_NV_UndefineSpace = 0x122
CC_NV_Increment = 0x134
CC_NV_Read = 0x14E
CC_Sign = 0x15D

EO = {"eq": 0, "neq": 1, "gt": 3, "lt": 5, "ge": 7, "le": 9}


def H(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return h.digest()


def u16(v):
    return struct.pack(">H", v)


def u32(v):
    return struct.pack(">I", v)


def u64(v):
    return struct.pack(">Q", v)


def pcr_extend(old, measurement):
    return H(old, measurement)


def pcr_selection(pcrs):
    bitmap = bytearray(3)
    for i in pcrs:
        bitmap[i // 8] |= 1 << (i % 8)
    # TPML_PCR_SELECTION: count=1, hash=SHA256 (0x000B), sizeofSelect=3
    return u32(1) + u16(0x000B) + bytes([3]) + bytes(bitmap)


def policy_pcr(old, pcrs, bank):
    composite = H(b"".join(bank[i] for i in sorted(set(pcrs))))
    return H(old, u32(PolicyPCR), pcr_selection(pcrs), composite)


def policy_nv(old, operand, op, nv_name):
    return H(old, u32(PolicyNV), H(operand, u16(EO[op])), nv_name)


def policy_command_code(old, code):
    return H(old, u32(PolicyCommandCode), u32(code))


def policy_auth_value(old):
    return H(old, u32(PolicyAuthValue))


policy_password = policy_auth_value


def policy_secret(old, object_name):
    return H(old, u32(PolicySecret), object_name)


def policy_counter_timer(old, ms, op):
    return H(old, u32(PolicyCounterTimer), H(u64(ms), u16(EO[op])))


def policy_or(digests):
    return H(ZERO, u32(PolicyOR), b"".join(digests))


def policy_authorize(key_name, policy_ref):
    return H(H(ZERO, u32(PolicyAuthorize), key_name), policy_ref)


def license_message(approved, policy_ref):
    return H(approved, policy_ref)


# names

def fields(*fs):
    return b"".join(u32(len(f)) + f for f in fs)


def name_of(area):
    return u16(0x000B) + H(area)


def key_name(public_key, auth_policy=b"", sign=True, fixed=True):
    bits = int(sign) | int(fixed) << 1
    return name_of(fields(b"KEY", u16(0x0044), u16(0x000B), u32(bits), auth_policy, public_key))


def external_key_name(public_key):
    return key_name(public_key, b"", True, False)


def nv_name(index, size, attr_bits, auth_policy=b""):
    return name_of(fields(b"NV", u32(index), u16(0x000B), u32(attr_bits), auth_policy, u16(size)))


# NV attribute bits: counter, writtenOnce, openIncrement, openRead, policyDelete
COUNTER_BITS = 0b11101
SECRET_BITS = 0


def counter_operand(n):
    return u64(n)


# flat replay of a step list

def replay(steps, start=ZERO):
    """steps: (command, args) tuples in the golden-corpus vocabulary."""
    d = start
    out = []
    for cmd, a in steps:
        if cmd == "PolicyPCR":
            d = policy_pcr(d, a["pcrs"], {i: v for i, v in zip(sorted(a["pcrs"]), a["pcrValues"])})
        elif cmd == "PolicyNV":
            d = policy_nv(d, a["operand"], a["op"], a["nvName"])
        elif cmd == "PolicyOR":
            d = policy_or(a["digests"])
        elif cmd == "PolicyAuthorize":
            d = policy_authorize(a["keyName"], a["policyRef"])
        elif cmd == "PolicySecret":
            d = policy_secret(d, a["objectName"])
        elif cmd in ("PolicyAuthValue", "PolicyPassword"):
            d = policy_auth_value(d)
        elif cmd == "PolicyCommandCode":
            d = policy_command_code(d, a["code"])
        elif cmd == "PolicyCounterTimer":
            d = policy_counter_timer(d, a["ms"], a["op"])
        else:
            raise ValueError(cmd)
        out.append(d)
    return out
