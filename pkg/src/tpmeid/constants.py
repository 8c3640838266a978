"""TPM 2.0 numeric constants.

Values are the ones from the TPM 2.0 library specification. They feed every
digest computation, so changing any of them changes every golden digest.
"""
import enum


class CC(enum.IntEnum):
    """TPM_CC command codes used by the simulator."""
    NV_UndefineSpace = 0x00000122
    NV_DefineSpace = 0x0000012A
    NV_Increment = 0x00000134
    PolicyNV = 0x00000149
    PolicySecret = 0x00000151
    Create = 0x00000153
    Sign = 0x0000015D
    NV_Read = 0x0000014E
    LoadExternal = 0x00000167
    PolicyAuthorize = 0x0000016A
    PolicyAuthValue = 0x0000016B
    PolicyCommandCode = 0x0000016C
    PolicyCounterTimer = 0x0000016D
    PolicyOR = 0x00000171
    StartAuthSession = 0x00000176
    VerifySignature = 0x00000177
    PolicyPCR = 0x0000017F
    PolicyRestart = 0x00000180
    PolicyPassword = 0x0000018C


class EO(enum.IntEnum):
    """TPM_EO arithmetic operators (unsigned variants only)."""
    EQ = 0x0000
    NEQ = 0x0001
    UNSIGNED_GT = 0x0003
    UNSIGNED_LT = 0x0005
    UNSIGNED_GE = 0x0007
    UNSIGNED_LE = 0x0009


# short operator names used by the DSL, the engine API and the CLI
OPERATORS = {
    "eq": EO.EQ,
    "neq": EO.NEQ,
    "gt": EO.UNSIGNED_GT,
    "lt": EO.UNSIGNED_LT,
    "ge": EO.UNSIGNED_GE,
    "le": EO.UNSIGNED_LE,
}

TIMER_OPERATORS = ("lt", "le", "gt", "ge")

# command names accepted by `command <name>;` in policy files
COMMAND_NAMES = {
    "sign": CC.Sign,
    "nv_read": CC.NV_Read,
    "nv_increment": CC.NV_Increment,
    "nv_undefine": CC.NV_UndefineSpace,
}

TPM_ALG_SHA256 = 0x000B
TPM_ALG_ED25519 = 0x0044  # not a TCG-assigned value; private scheme id for this simulator

PCR_COUNT = 24
PCR_SELECT_BYTES = 3

SESSION_HANDLE_BASE = 0x03000000
KEY_HANDLE_BASE = 0x81000000
EXTERNAL_HANDLE_BASE = 0x80000000
