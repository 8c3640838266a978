import dataclasses
import itertools

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracle as o
from tpmeid import crypto, engine
from tpmeid.corpus import policy_source
from tpmeid.errors import EidError, StateFileError, TpmError
from tpmeid.helper import (
    EidHelper,
    SimulatedPowerLoss,
    _HelperRunner,
    counter_reset_source,
    eid_policy_source,
    load_bundle,
    save_bundle,
)
from tpmeid.store import clock_advance, new_store, pcr_extend, save_state, startup_clear

PIN = "1234"
MSG = o.H(b"document")


def test_shipped_policies_match_generated():
    assert policy_source("eid_sign") == eid_policy_source()
    assert policy_source("eid_sign_revocable") == eid_policy_source(revocable=True)
    assert policy_source("counter_reset") == counter_reset_source()


def test_max_attempts_bounds(booted, ra):
    with pytest.raises(ValueError):
        EidHelper(booted, ra, max_attempts=8)
    EidHelper(booted, ra, max_attempts=7)


class TestProvisioning:
    def test_pin_record(self, booted, ra):
        rec = EidHelper(booted, ra).provision_pin(PIN)
        assert rec.name == o.nv_name(0x1501, 0, 0)
        assert booted.nv[0x1501].auth_value == b"1234" and booted.nv[0x1501].data == b""

    @pytest.mark.parametrize("pin", ["123", "1234567890123", "12a4"])
    def test_pin_policy(self, booted, ra, pin):
        with pytest.raises(EidError) as e:
            EidHelper(booted, ra).provision_pin(pin)
        assert e.value.reason == "pin_policy"
        assert 0x1501 not in booted.nv

    def test_index_collision(self, booted, ra):
        EidHelper(booted, ra).provision_pin(PIN)
        with pytest.raises(EidError) as e:
            EidHelper(booted, ra).provision_pin(PIN)
        assert e.value.reason == "index_in_use"

    def test_puk_entropy_and_single_disclosure(self, helper):
        assert len(bytes.fromhex(helper.puk_text)) == 16
        assert helper.take_pending_puk() == helper.puk_text
        with pytest.raises(EidError, match="puk already shown"):
            helper.take_pending_puk()

    def test_counter_needs_pin_and_puk(self, booted, ra):
        with pytest.raises(EidError) as e:
            EidHelper(booted, ra).provision_counter()
        assert e.value.reason == "not_provisioned"

    def test_counter_policy_matches_golden_inputs(self, helper):
        ra_name = helper.ra.ra_key_name
        ref = ("reset:" + helper.device_id).encode()
        expected = o.policy_or([
            o.policy_command_code(o.policy_authorize(ra_name, ref), o.CC_NV_UndefineSpace),
            o.policy_command_code(o.ZERO, o.CC_NV_Increment),
            o.policy_command_code(o.ZERO, o.CC_NV_Read),
        ])
        assert helper.counter.auth_policy == expected
        assert helper.counter.name == o.nv_name(0x1500, 8, o.COUNTER_BITS, expected)
        assert set(helper.counter.licenses) == {"platform", "reset"}


class TestEnrol:
    def test_licenses_and_policy(self, helper):
        cred = helper.enroll_key(revocable=False)
        assert set(cred.licenses) == {"platform", "pincount", "pinentry"}
        assert helper.store.keys[cred.key_handle].auth_policy == helper.signing_policy(False).trial_digest
        assert cred.certificate.tpm_resident

    def test_revocable_has_time_license(self, helper):
        cred = helper.enroll_key(revocable=True, window_ms=5000)
        assert set(cred.licenses) == {"platform", "pincount", "pinentry", "revocation"}
        assert cred.window_end_ms == 5000
        assert cred.licenses["revocation"].not_after_ms == 5000

    def test_unprovisioned(self, booted, ra):
        with pytest.raises(EidError) as e:
            EidHelper(booted, ra).enroll_key()
        assert e.value.reason == "not_provisioned"

    def test_missing_counter(self, helper):
        del helper.store.nv[0x1500]
        with pytest.raises(EidError) as e:
            helper.enroll_key()
        assert e.value.reason == "counter_missing"

    def test_pair_branches_are_exactly_consecutive(self, helper):
        c = helper.signing_policy(False)
        (digests,) = c.branch_digests.values()
        start = c.plan[1].digest
        name = helper.counter.name
        assert digests == [o.policy_nv(o.policy_nv(start, o.u64(n), "eq", name), o.u64(n + 1), "eq", name)
                           for n in range(3)]


class TestSigning:
    def test_fresh_counter(self, helper):
        cred = helper.enroll_key(revocable=False)
        sig = helper.sign_with_pin(cred, PIN, MSG)
        assert crypto.verify(cred.certificate.public_key, MSG, sig)
        assert helper.counter_value() == 0

    def test_wrong_pin_reports_remaining(self, helper):
        cred = helper.enroll_key(revocable=False)
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, "9999", MSG)
        assert e.value.extra["remaining_attempts"] == 2
        assert e.value.as_dict()["stage"] == "immediate"

    def test_pin_buffer_wiped(self, helper):
        cred = helper.enroll_key(revocable=False)
        buf = bytearray(b"1234")
        helper.sign_with_pin(cred, buf, MSG)
        assert buf == bytearray(4)

    def test_window_lapse_does_not_consume_attempt(self, helper):
        cred = helper.enroll_key(revocable=True, window_ms=1000)
        clock_advance(helper.store, 1000)
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, PIN, MSG)
        assert e.value.reason == "timer_assertion_failed"
        assert helper.counter_value() == 0

    def test_refresh_extends_window(self, helper):
        cred = helper.enroll_key(revocable=True, window_ms=1000)
        clock_advance(helper.store, 900)
        helper.refresh_revocation_license(cred, 10000)
        clock_advance(helper.store, 5000)
        assert helper.sign_with_pin(cred, PIN, MSG)

    def test_refresh_refused_after_revocation(self, helper):
        cred = helper.enroll_key(revocable=True)
        helper.ra.revoke(cred.cred_id)
        with pytest.raises(EidError) as e:
            helper.refresh_revocation_license(cred, 1000)
        assert e.value.reason == "credential_revoked"

    def test_refresh_needs_revocable(self, helper):
        cred = helper.enroll_key(revocable=False)
        with pytest.raises(EidError, match="not revocable"):
            helper.refresh_revocation_license(cred, 1000)

    def test_firmware_change_needs_relicense(self, helper):
        cred = helper.enroll_key(revocable=False)
        startup_clear(helper.store)
        pcr_extend(helper.store, 0, o.H(b"firmware v2"))
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, PIN, MSG)
        assert e.value.reason == "license_rejected"
        helper.relicense_platform()
        helper.reset_counter_with_puk(helper.puk_text)
        assert helper.sign_with_pin(cred, PIN, MSG)


class TestPinChange:
    def test_old_pin_rejected_afterwards(self, helper):
        cred = helper.enroll_key(revocable=False)
        helper.change_pin(PIN, "5678")
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, PIN, MSG)
        assert e.value.reason == "wrong_pin"
        assert helper.counter_value() == 1
        assert helper.sign_with_pin(cred, "5678", MSG)

    def test_wrong_old_pin(self, helper):
        with pytest.raises(EidError) as e:
            helper.change_pin("0000", "5678")
        assert e.value.reason == "wrong_pin"
        assert helper.store.nv[0x1501].auth_value == b"1234"
        assert helper.counter_value() == 1

    def test_bad_new_pin(self, helper):
        with pytest.raises(EidError, match="pin policy"):
            helper.change_pin(PIN, "12")
        assert helper.counter_value() == 0


class TestCounterRecovery:
    def test_crash_between_undefine_and_define(self, helper):
        cred = helper.enroll_key(revocable=False)

        def crash(point):
            if point == "after_undefine":
                raise SimulatedPowerLoss(point)

        helper.fault = crash
        with pytest.raises(SimulatedPowerLoss):
            helper.sign_with_pin(cred, PIN, MSG)
        helper.fault = None
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, PIN, MSG)
        assert e.value.reason == "counter_missing"
        rec = helper.repair_counter()
        assert helper.store.nv[0x1500].name == rec.name
        assert helper.counter_value() == 0
        assert helper.sign_with_pin(cred, PIN, MSG)

    def test_repair_refused_when_present(self, helper):
        with pytest.raises(EidError) as e:
            helper.repair_counter()
        assert e.value.reason == "counter_present"

    def test_wrong_puk_keeps_counter(self, helper):
        cred = helper.enroll_key(revocable=False)
        with pytest.raises(EidError):
            helper.sign_with_pin(cred, "0000", MSG)
        with pytest.raises(EidError) as e:
            helper.reset_counter_with_puk("ff" * 16)
        assert e.value.reason == "wrong_puk"
        assert helper.counter_value() == 1


# a misbehaving helper can only deny service

_LABELS = ["platform", "pincount", "pinentry", "revocation"]


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(perm=st.permutations(_LABELS), drop=st.sets(st.sampled_from(_LABELS), max_size=2))
def test_swapped_or_missing_licenses_never_sign(helper, perm, drop):
    cred = helper.credentials.get("fuzz") or helper.enroll_key(revocable=True)
    helper.credentials["fuzz"] = cred
    original = dict(cred.licenses)
    if list(perm) == _LABELS and not drop:
        return
    try:
        # present each license under another fragment's policyRef
        cred.licenses = {dst: dataclasses.replace(original[src], policy_ref=original[dst].policy_ref)
                         for src, dst in zip(_LABELS, perm) if dst not in drop}
        with pytest.raises(EidError) as e:
            helper.sign_with_pin(cred, PIN, MSG)
        assert e.value.reason in ("license_rejected", "license_missing")
    finally:
        cred.licenses = original
        if helper.counter_value():
            helper.reset_counter_with_puk(helper.puk_text)


def test_skipping_fragments_never_signs(helper):
    cred = helper.enroll_key(revocable=False)
    plan = helper.signing_policy(False).plan
    licenses = {lic.policy_ref: lic for lic in cred.licenses.values()}
    for skipped in itertools.chain.from_iterable(itertools.combinations(range(len(plan)), k) for k in (1, 2)):
        h = engine.start_auth_session(helper.store)
        runner = _HelperRunner(helper, h, cred.pin_index, secrets={cred.pin_index: b"1234"}, licenses=licenses)
        try:
            runner.run([s for i, s in enumerate(plan) if i not in skipped])
            with pytest.raises(TpmError):
                engine.sign_gated(helper.store, cred.key_handle, MSG, h)
        except (TpmError, EidError):
            engine.flush_session(helper.store, h)
        helper.store.nv[0x1500].data = bytes(8)


class TestPersistence:
    def test_wallet_round_trip(self, helper, tmp_path):
        cred = helper.enroll_key(revocable=True)
        helper.save(tmp_path / "wallet")
        save_state(helper.store, tmp_path / "state")
        back = EidHelper.load(helper.store, helper.ra, tmp_path / "wallet")
        assert back.to_json() == helper.to_json()
        assert back.sign_with_pin(back.credential(cred.cred_id), PIN, MSG)

    def test_wallet_bound_to_device(self, helper, ra, tmp_path):
        helper.save(tmp_path / "wallet")
        other = new_store(crypto.Drbg(b"another device"))
        with pytest.raises(StateFileError, match="belongs to device"):
            EidHelper.load(other, ra, tmp_path / "wallet")

    def test_bundle_has_no_secrets(self, helper, tmp_path):
        cred = helper.enroll_key(revocable=True)
        save_bundle(cred, tmp_path / "bundle")
        raw = (tmp_path / "bundle").read_text()
        key = helper.store.keys[cred.key_handle]
        for secret in (key.private_key.hex(), helper.store.proof_value.hex(), helper.puk_text,
                       helper.ra.ra_key.private.hex(), b"1234".hex()):
            assert secret not in raw
        assert '"1234"' not in raw
        assert load_bundle(tmp_path / "bundle") == cred

    def test_credential_lookup(self, helper):
        with pytest.raises(EidError, match="no credential"):
            helper.credential()
        a = helper.enroll_key(revocable=False)
        assert helper.credential() is a
        helper.enroll_key(revocable=False)
        with pytest.raises(EidError, match="credential ambiguous"):
            helper.credential()
