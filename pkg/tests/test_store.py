import json

import pytest

import oracle as o
from tpmeid import crypto
from tpmeid.errors import StateFileError, TpmError
from tpmeid.store import (
    NvAttributes,
    clock_advance,
    clock_read,
    create_key,
    load_external,
    load_state,
    new_store,
    nv_define_space,
    nv_increment,
    nv_read,
    nv_read_counter,
    nv_undefine_space,
    pcr_extend,
    save_state,
    startup_clear,
)

COUNTER = NvAttributes(is_counter=True, open_increment=True, open_read=True)


def test_pcr_extend_from_zero():
    s = new_store(crypto.Drbg(b"p"))
    d = o.H(b"m")
    assert pcr_extend(s, 0, d) == o.H(o.ZERO, d)
    assert s.pcr_bank.update_counter == 1


def test_pcr_extend_order_and_isolation():
    a, b = o.H(b"a"), o.H(b"b")
    s1, s2 = new_store(crypto.Drbg(b"1")), new_store(crypto.Drbg(b"2"))
    pcr_extend(s1, 0, a)
    pcr_extend(s1, 0, b)
    pcr_extend(s2, 0, b)
    pcr_extend(s2, 0, a)
    assert s1.pcr_bank.pcrs[0] == o.H(o.H(o.ZERO, a), b)
    assert s1.pcr_bank.pcrs[0] != s2.pcr_bank.pcrs[0]
    before = s1.pcr_bank.pcrs[0]
    pcr_extend(s1, 1, a)
    assert s1.pcr_bank.pcrs[0] == before


def test_pcr_index_out_of_range(store):
    with pytest.raises(TpmError) as e:
        pcr_extend(store, 24, o.H(b"x"))
    assert e.value.reason == "pcr_index_out_of_range"


def test_startup_clear_keeps_update_counter(store):
    pcr_extend(store, 0, o.H(b"x"))
    startup_clear(store)
    assert store.pcr_bank.pcrs[0] == o.ZERO
    assert store.pcr_bank.update_counter == 1


class TestNv:
    def test_counter_define_and_name(self, store):
        name = nv_define_space(store, 0x1500, 8, COUNTER)
        assert name == o.nv_name(0x1500, 8, 0b01101)
        assert nv_read_counter(store, 0x1500) == 0

    def test_name_survives_recreation_with_new_auth(self, store):
        n1 = nv_define_space(store, 0x1501, 0, NvAttributes(), b"1234")
        nv_undefine_space(store, 0x1501, b"1234")
        n2 = nv_define_space(store, 0x1501, 0, NvAttributes(), b"9876")
        assert n1 == n2 == o.nv_name(0x1501, 0, 0)

    def test_occupied_index(self, store):
        nv_define_space(store, 0x1500, 8, COUNTER)
        with pytest.raises(TpmError) as e:
            nv_define_space(store, 0x1500, 8, COUNTER)
        assert e.value.reason == "nv_defined"

    def test_counter_size_must_be_8(self, store):
        with pytest.raises(TpmError):
            nv_define_space(store, 0x1500, 4, COUNTER)

    def test_undefine_wrong_auth_keeps_index(self, store):
        nv_define_space(store, 0x1501, 0, NvAttributes(), b"1234")
        with pytest.raises(TpmError) as e:
            nv_undefine_space(store, 0x1501, b"0000")
        assert e.value.reason == "auth_value_mismatch"
        assert 0x1501 in store.nv

    def test_policy_delete_refuses_password(self, store):
        nv_define_space(store, 0x1500, 8, NvAttributes(True, False, True, True, True))
        with pytest.raises(TpmError) as e:
            nv_undefine_space(store, 0x1500, b"")
        assert e.value.reason == "policy_required"

    def test_increment(self, store):
        nv_define_space(store, 0x1500, 8, COUNTER)
        assert [nv_increment(store, 0x1500) for _ in range(3)] == [1, 2, 3]
        assert nv_read(store, 0x1500) == (3).to_bytes(8, "big")

    def test_increment_non_counter(self, store):
        nv_define_space(store, 0x1501, 0, NvAttributes(open_read=True))
        with pytest.raises(TpmError) as e:
            nv_increment(store, 0x1501)
        assert e.value.reason == "not_a_counter"

    def test_closed_read_needs_auth(self, store):
        nv_define_space(store, 0x1600, 8, NvAttributes(is_counter=True), b"pw")
        with pytest.raises(TpmError):
            nv_read(store, 0x1600)
        assert nv_read(store, 0x1600, b"pw") == bytes(8)

    def test_missing_index(self, store):
        with pytest.raises(TpmError) as e:
            nv_read(store, 0x1999)
        assert e.value.reason == "no_such_nv_index"

    def test_platform_auth_knob(self):
        s = new_store(crypto.Drbg(b"k"), platform_auth=b"owner")
        with pytest.raises(TpmError):
            nv_define_space(s, 0x1500, 8, COUNTER)
        nv_define_space(s, 0x1500, 8, COUNTER, platform_auth=b"owner")


class TestKeys:
    def test_creation_data_echoes_policy(self, booted):
        h, cd, name = create_key(booted, b"\x07" * 32)
        assert cd.auth_policy == b"\x07" * 32
        assert cd.pcr_digest == o.H(booted.pcr_bank.pcrs[0])
        assert name == o.key_name(booted.keys[h].public_key, b"\x07" * 32)

    def test_shared_policy_distinct_names(self, store):
        _, _, n1 = create_key(store, b"\x07" * 32)
        _, _, n2 = create_key(store, b"\x07" * 32)
        assert n1 != n2

    def test_load_external_twice(self, store, ra):
        h1 = load_external(store, ra.ra_public)
        h2 = load_external(store, ra.ra_public)
        assert h1 != h2
        assert store.loaded_external[h1].name == store.loaded_external[h2].name == o.external_key_name(ra.ra_public)

    def test_load_external_malformed(self, store):
        with pytest.raises(TpmError) as e:
            load_external(store, b"\x01\x02")
        assert e.value.reason == "malformed_key"

    def test_repr_hides_private_key(self, store):
        h, _, _ = create_key(store, b"")
        assert store.keys[h].private_key.hex() not in repr(store.keys[h])


class TestClock:
    def test_advance(self, store):
        assert clock_advance(store, 0) == 0
        assert clock_advance(store, 1000) == 1000
        assert clock_read(store) == 1000

    def test_no_negative(self, store):
        with pytest.raises(ValueError):
            clock_advance(store, -1)

    def test_snapshot_survives_power_loss(self, store, tmp_path):
        clock_advance(store, 70000)
        clock_advance(store, 5000)
        save_state(store, tmp_path / "s", orderly=False)
        ms = clock_read(load_state(tmp_path / "s"))
        assert ms == 70000
        assert ms >= 60000

    def test_orderly_save_keeps_live_clock(self, store, tmp_path):
        clock_advance(store, 1234)
        save_state(store, tmp_path / "s")
        assert clock_read(load_state(tmp_path / "s")) == 1234


class TestStateFile:
    def _populate(self, s):
        pcr_extend(s, 0, o.H(b"x"))
        nv_define_space(s, 0x1500, 8, COUNTER)
        nv_increment(s, 0x1500)
        create_key(s, b"\x01" * 32, b"secret")
        load_external(s, crypto.generate_keypair(crypto.Drbg(b"e")).public)

    def test_round_trip(self, store, tmp_path):
        self._populate(store)
        path = tmp_path / "state"
        save_state(store, path)
        back = load_state(path)
        assert {h: k.name for h, k in back.keys.items()} == {h: k.name for h, k in store.keys.items()}
        assert {i: n.name for i, n in back.nv.items()} == {i: n.name for i, n in store.nv.items()}
        assert back.pcr_bank == store.pcr_bank
        assert back.proof_value == store.proof_value
        assert nv_read_counter(back, 0x1500) == 1
        assert back.sessions == {} and back.loaded_external == {}

    def test_header(self, store, tmp_path):
        save_state(store, tmp_path / "state")
        doc = json.loads((tmp_path / "state").read_bytes())
        assert (doc["magic"], doc["version"], doc["hashAlg"], doc["kind"]) == ("TPM2EA", 1, "sha256", "tpm-state")
        body = json.dumps(doc["body"], sort_keys=True, separators=(",", ":")).encode()
        assert doc["checksum"] == o.H(body).hex()

    def test_flipped_byte(self, store, tmp_path):
        self._populate(store)
        path = tmp_path / "state"
        save_state(store, path)
        raw = bytearray(path.read_bytes())
        i = raw.index(b'"data":"') + len(b'"data":"')
        raw[i] = ord("1") if raw[i] != ord("1") else ord("2")
        path.write_bytes(bytes(raw))
        with pytest.raises(StateFileError, match="checksum"):
            load_state(path)

    def test_version_mismatch(self, store, tmp_path):
        path = tmp_path / "state"
        save_state(store, path)
        doc = json.loads(path.read_bytes())
        doc["version"] = 2
        path.write_text(json.dumps(doc))
        with pytest.raises(StateFileError, match="version"):
            load_state(path)

    def test_garbage(self, tmp_path):
        (tmp_path / "state").write_bytes(b"\x00garbage")
        with pytest.raises(StateFileError):
            load_state(tmp_path / "state")
