"""Exception types.

Every TPM-side failure carries a stage (immediate, deferred, gate or command),
the command that failed and a machine-readable reason string.
"""


class TpmError(Exception):
    def __init__(self, stage: str, command: str, reason: str, detail: str = ""):
        self.stage = stage
        self.command = command
        self.reason = reason
        self.detail = detail
        msg = "%s: %s (%s)" % (command, reason.replace("_", " "), stage)
        if detail:
            msg += ": " + detail
        super().__init__(msg)

    def as_dict(self):
        d = {"stage": self.stage, "command": self.command, "reason": self.reason}
        if self.detail:
            d["detail"] = self.detail
        return d


class StateFileError(Exception):
    """Corrupt, truncated or incompatible state/registry file."""


class EidError(Exception):
    """Helper-level failure (retry limit, wrong PIN, missing license, ...)."""

    def __init__(self, reason: str, detail: str = "", cause: TpmError = None, **extra):
        self.reason = reason
        self.detail = detail
        self.cause = cause
        self.extra = extra
        msg = reason.replace("_", " ")
        if detail:
            msg += ": " + detail
        super().__init__(msg)

    def as_dict(self):
        if self.cause is not None:
            d = self.cause.as_dict()
            d["reason"] = self.reason
        else:
            d = {"stage": "helper", "command": "eid", "reason": self.reason}
        if self.detail:
            d["detail"] = self.detail
        d.update(self.extra)
        return d


class RaError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(reason.replace("_", " ") + (": " + detail if detail else ""))

    def as_dict(self):
        d = {"stage": "ra", "command": "ra", "reason": self.reason}
        if self.detail:
            d["detail"] = self.detail
        return d
