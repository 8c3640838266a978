"""``tpm-eid`` command line.

Every invocation loads three files, runs one operation and writes them back
under an advisory lock:

* the TPM state (``--state``, default ``./tpm-state.json``),
* the RA registry (``<state>.ra``),
* the helper wallet (``<state>.eid``).

Exit status: 0 success, 1 domain failure (one JSON object on stderr with at
least ``stage``, ``command`` and ``reason``), 2 usage error.
"""
import argparse
import hashlib
import json
import os
import sys

from filelock import FileLock

from . import crypto, dsl
from .errors import EidError, RaError, StateFileError, TpmError
from .helper import DEFAULT_MAX_ATTEMPTS, DEFAULT_WINDOW_MS, EidHelper, save_bundle
from .ra import Certificate, RegistrationAuthority
from .store import (
    clock_advance,
    clock_read,
    external_key_name,
    load_state,
    new_store,
    pcr_extend,
    read_container,
    save_state,
    startup_clear,
    write_container,
)

CERT_KIND = "eid-certificate"


class CliFailure(Exception):
    def __init__(self, reason, detail="", command="cli", stage="cli"):
        self.info = {"stage": stage, "command": command, "reason": reason}
        if detail:
            self.info["detail"] = detail
        super().__init__(reason.replace("_", " ") + (": " + detail if detail else ""))


class Workspace:
    """The three files behind one simulated device, loaded and saved together."""

    def __init__(self, args):
        self.state_path = args.state
        self.registry_path = args.registry or args.state + ".ra"
        self.wallet_path = args.state + ".eid"
        self.seed = args.seed
        self.store = self.ra = self.helper = None

    def paths(self):
        return (self.state_path, self.registry_path, self.wallet_path)

    def random(self):
        if self.seed is None:
            return os.urandom
        h = hashlib.sha256(self.seed.encode())
        for p in self.paths():
            if os.path.exists(p):
                with open(p, "rb") as f:
                    h.update(f.read())
        return crypto.Drbg(h.digest())

    def exists(self):
        return os.path.exists(self.state_path)

    def load(self):
        if not self.exists():
            raise CliFailure("no_state", "%s not found; run `init` first" % self.state_path)
        rnd = self.random()
        self.store = load_state(self.state_path, rnd)
        self.ra = RegistrationAuthority.load(self.registry_path)
        self.helper = EidHelper.load(self.store, self.ra, self.wallet_path)
        return self.helper

    def save(self):
        save_state(self.store, self.state_path)
        self.ra.save(self.registry_path)
        self.helper.save(self.wallet_path)


def _hex(text):
    try:
        return bytes.fromhex(text[2:] if text.lower().startswith("0x") else text)
    except ValueError:
        raise argparse.ArgumentTypeError("not a hex string: %r" % text) from None


def _int(text):
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError("not an integer: %r" % text) from None


def _out(text=""):
    sys.stdout.write(text + "\n")


# commands

def cmd_init(ws, args):
    if ws.exists() and not args.force:
        raise CliFailure("state_exists", "%s already exists (use --force)" % ws.state_path, "init")
    rnd = ws.random()
    platform_auth = args.platform_auth
    store = new_store(rnd, platform_auth=platform_auth)
    ra = RegistrationAuthority.generate(rnd)
    ws.store, ws.ra = store, ra
    ws.helper = EidHelper(store, ra, max_attempts=args.max_attempts)
    ws.helper.platform_auth = platform_auth
    _out("device %s" % store.device_id)
    _out("ra-key-name %s" % ra.ra_key_name.hex())


def cmd_boot(ws, args):
    st = ws.store
    startup_clear(st)
    for m in args.measure:
        if len(m) != crypto.DIGEST_SIZE:
            raise CliFailure("bad_measurement", "measurements are 32-byte hex digests", "boot")
        pcr_extend(st, args.pcr, m)
    _out("pcr%d %s" % (args.pcr, st.pcr_bank.pcrs[args.pcr].hex()))


def cmd_pin_provision(ws, args):
    h = ws.helper
    h.provision(args.pin)
    _out("pin 0x%x provisioned; counter 0x%x; puk 0x%x (run `puk show-once`)"
         % (h.pin_index, h.counter_index, h.puk_index))


def cmd_pin_change(ws, args):
    ws.helper.change_pin(args.old, args.new)
    _out("pin changed")


def cmd_puk_show_once(ws, args):
    _out(ws.helper.take_pending_puk())


def cmd_enroll(ws, args):
    h = ws.helper
    cred = h.enroll_key(revocable=not args.no_revocation, window_ms=args.window_ms)
    base = os.path.dirname(os.path.abspath(ws.state_path))
    cert_out = args.cert_out or os.path.join(base, "%s.cert" % cred.cred_id)
    write_container(cert_out, CERT_KIND, cred.certificate.to_json())
    if args.bundle_out:
        save_bundle(cred, args.bundle_out)
    _out("credential %s" % cred.cred_id)
    _out("certificate %s" % cert_out)
    if cred.revocable:
        _out("window-end-ms %d" % cred.window_end_ms)


def cmd_sign(ws, args):
    h = ws.helper
    cred = h.credential(args.cred)
    with open(args.input, "rb") as f:
        digest = hashlib.sha256(f.read()).digest()
    sig = h.sign_with_pin(cred, args.pin, digest)
    out = args.out or args.input + ".sig"
    with open(out, "w") as f:
        f.write(sig.hex() + "\n")
    _out("signature %s" % out)


def cmd_verify(ws, args):
    ra = RegistrationAuthority.load(ws.registry_path)
    cert = Certificate.from_json(read_container(args.cert, CERT_KIND))
    if not cert.verify(ra.ca_public):
        raise CliFailure("bad_certificate", "CA signature does not verify", "verify", "verify")
    if not cert.tpm_resident:
        raise CliFailure("bad_certificate", "missing tpm_resident extension", "verify", "verify")
    with open(args.input, "rb") as f:
        digest = hashlib.sha256(f.read()).digest()
    with open(args.sig) as f:
        sig = _hex(f.read().strip())
    if not crypto.verify(cert.public_key, digest, sig, cert.scheme):
        raise CliFailure("bad_signature", "", "verify", "verify")
    _out("signature valid: %s" % cert.subject)


def cmd_reset_counter(ws, args):
    ws.helper.reset_counter_with_puk(args.puk)
    _out("counter reset to 0")


def cmd_repair_counter(ws, args):
    ws.helper.repair_counter(args.platform_auth)
    _out("counter 0x%x recreated" % ws.helper.counter_index)


def cmd_license_refresh(ws, args):
    h = ws.helper
    lic = h.refresh_revocation_license(h.credential(args.cred), args.window_ms)
    _out("window-end-ms %d" % lic.not_after_ms)


def cmd_clock_advance(ws, args):
    if args.ms < 0:
        raise CliFailure("bad_argument", "--ms must not be negative", "clock")
    _out("clock-ms %d" % clock_advance(ws.store, args.ms))


def cmd_clock_read(ws, args):
    _out("clock-ms %d" % clock_read(ws.store))


def cmd_status(ws, args):
    h = ws.helper
    _out("device %s" % h.device_id)
    _out("clock-ms %d" % clock_read(ws.store))
    if h.counter is not None:
        present = h.counter_index in ws.store.nv
        _out("counter %s" % (h.counter_value() if present else "missing"))
    for cid, cred in sorted(h.credentials.items()):
        state = "revoked" if ws.ra.is_revoked(cid) else "active"
        _out("credential %s %s window-end-ms %s" % (cid, state, cred.window_end_ms))


def cmd_ra_revoke(ws, args):
    ws.ra.revoke(args.cred_id)
    _out("revoked %s" % args.cred_id)


def _symbols(ws, pairs):
    syms = {}
    if ws.helper is not None and ws.helper.counter is not None:
        syms.update(ws.helper.symbols())
    for item in pairs:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise CliFailure("bad_symbol", item, "policy")
        if value.startswith("nv:"):
            if ws.store is None:
                raise CliFailure("bad_symbol", "nv: symbols need a state file", "policy")
            index = _int(value[3:])
            if index not in ws.store.nv:
                raise CliFailure("bad_symbol", "no NV index %#x" % index, "policy")
            syms[name] = dsl.NvSymbol(index, ws.store.nv[index].name)
        elif value.startswith("key:"):
            pub = _hex(value[4:])
            syms[name] = dsl.KeySymbol(external_key_name(pub), pub)
        elif value.lower().startswith("0x") and len(value) == 66:
            syms[name] = dsl.DigestSymbol(_hex(value))
        else:
            syms[name] = dsl.ValueSymbol(_int(value))
    return syms


def _compile(ws, args):
    with open(args.file, encoding="utf-8") as f:
        source = f.read()
    try:
        ast = dsl.parse(source)
    except dsl.PolicySyntaxError as e:
        raise CliFailure("syntax_error", "%s:%s" % (args.file, e), "policy", "parse") from None
    if args.ref_suffix is not None:
        suffix = args.ref_suffix.encode()
    else:
        suffix = b":" + ws.store.device_id.encode() if ws.store is not None else b""
    try:
        return dsl.compile_policy(ast, _symbols(ws, args.sym), suffix, ws.store)
    except dsl.PolicyCompileError as e:
        raise CliFailure("compile_error", "%s:%s" % (args.file, e), "policy", "compile") from None


def cmd_policy_compile(ws, args):
    _out(_compile(ws, args).trial_digest.hex())


def cmd_policy_explain(ws, args):
    sys.stdout.write(dsl.explain(_compile(ws, args)))


# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpm-eid", description="Simulated TPM 2.0 EA eID signing.")
    p.add_argument("--state", default="./tpm-state.json", help="TPM state file")
    p.add_argument("--registry", help="RA registry file (default: <state>.ra)")
    p.add_argument("--seed", help="derive all randomness from this seed")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("init", help="create a fresh device, RA and wallet")
    s.add_argument("--force", action="store_true")
    s.add_argument("--max-attempts", type=_int, default=DEFAULT_MAX_ATTEMPTS)
    s.add_argument("--platform-auth", type=_hex, help="require this value to (re)define NV indices")
    s.set_defaults(fn=cmd_init, needs_state=False)

    s = sub.add_parser("boot", help="startup and extend boot measurements")
    s.add_argument("--measure", type=_hex, nargs="+", required=True, metavar="HEX")
    s.add_argument("--pcr", type=_int, default=0)
    s.set_defaults(fn=cmd_boot)

    pin = sub.add_parser("pin", help="PIN management").add_subparsers(dest="pin_command", required=True)
    s = pin.add_parser("provision", help="create PIN, PUK and retry counter")
    s.add_argument("pin")
    s.set_defaults(fn=cmd_pin_provision)
    s = pin.add_parser("change")
    s.add_argument("old")
    s.add_argument("new")
    s.set_defaults(fn=cmd_pin_change)

    puk = sub.add_parser("puk", help="PUK disclosure").add_subparsers(dest="puk_command", required=True)
    puk.add_parser("show-once", help="print the PUK, then forget it").set_defaults(fn=cmd_puk_show_once)

    s = sub.add_parser("enroll", help="create an eID key and enrol it with the RA")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--window-ms", type=_int, default=DEFAULT_WINDOW_MS)
    g.add_argument("--no-revocation", action="store_true")
    s.add_argument("--cert-out")
    s.add_argument("--bundle-out")
    s.set_defaults(fn=cmd_enroll)

    s = sub.add_parser("sign", help="sign a file with the eID key")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--pin", required=True)
    s.add_argument("--cred")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sign)

    s = sub.add_parser("verify", help="verify a signature against a certificate")
    s.add_argument("--cert", required=True)
    s.add_argument("--sig", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.set_defaults(fn=cmd_verify, needs_state=False)

    s = sub.add_parser("reset-counter", help="reset the PIN retry counter with the PUK")
    s.add_argument("--puk", required=True)
    s.set_defaults(fn=cmd_reset_counter)

    s = sub.add_parser("repair-counter", help="recreate a counter lost in an interrupted reset")
    s.add_argument("--platform-auth", type=_hex)
    s.set_defaults(fn=cmd_repair_counter)

    lic = sub.add_parser("license", help="RA licenses").add_subparsers(dest="license_command", required=True)
    s = lic.add_parser("refresh", help="renew the revocation window")
    s.add_argument("--window-ms", type=_int, required=True)
    s.add_argument("--cred")
    s.set_defaults(fn=cmd_license_refresh)

    clock = sub.add_parser("clock", help="TPM clock").add_subparsers(dest="clock_command", required=True)
    s = clock.add_parser("advance")
    s.add_argument("--ms", type=_int, required=True)
    s.set_defaults(fn=cmd_clock_advance)
    clock.add_parser("read").set_defaults(fn=cmd_clock_read)

    sub.add_parser("status", help="counter, clock and credentials").set_defaults(fn=cmd_status)

    pol = sub.add_parser("policy", help="policy language tools").add_subparsers(dest="policy_command",
                                                                               required=True)
    for name, fn in (("compile", cmd_policy_compile), ("explain", cmd_policy_explain)):
        s = pol.add_parser(name)
        s.add_argument("file")
        s.add_argument("--sym", action="append", default=[], metavar="NAME=VALUE",
                       help="nv:INDEX, key:HEXPUB, 0x<64 hex> digest or integer")
        s.add_argument("--ref-suffix", help="appended to every authorize label")
        s.set_defaults(fn=fn, needs_state=None)

    ra = sub.add_parser("ra", help="RA administration").add_subparsers(dest="ra_command", required=True)
    s = ra.add_parser("revoke")
    s.add_argument("cred_id")
    s.set_defaults(fn=cmd_ra_revoke)
    return p


def _report(info, message):
    d = dict(info)
    d["message"] = message
    sys.stderr.write(json.dumps(d, sort_keys=True) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ws = Workspace(args)
    needs = getattr(args, "needs_state", True)
    lock_dir = os.path.dirname(os.path.abspath(ws.state_path))
    if not os.path.isdir(lock_dir):
        _report({"stage": "cli", "command": args.command, "reason": "no_such_directory"}, lock_dir)
        return 1
    with FileLock(ws.state_path + ".lock"):
        loaded = False
        try:
            if needs or (needs is None and ws.exists()):
                ws.load()
                loaded = True
            try:
                args.fn(ws, args)
            finally:
                # failed attempts (counter increments) must persist too
                if loaded or args.fn is cmd_init:
                    if ws.helper is not None:
                        ws.save()
        except (TpmError, EidError, RaError) as e:
            _report(e.as_dict(), str(e))
            return 1
        except CliFailure as e:
            _report(e.info, str(e))
            return 1
        except StateFileError as e:
            _report({"stage": "state", "command": args.command, "reason": "bad_state_file"}, str(e))
            return 1
        except OSError as e:
            _report({"stage": "cli", "command": args.command, "reason": "io_error"}, str(e))
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
