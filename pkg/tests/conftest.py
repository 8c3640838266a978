import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from tpmeid import crypto  # noqa: E402
from tpmeid.helper import EidHelper  # noqa: E402
from tpmeid.ra import RegistrationAuthority  # noqa: E402
from tpmeid.store import new_store, pcr_extend  # noqa: E402

PIN = "1234"

_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(ac_id, title): acceptance criterion covered by this test")


def pytest_runtest_logreport(report):
    ac = getattr(report, "acceptance", None)
    if ac is None:
        return
    if report.when == "call" or report.failed:
        ok = report.passed and _acceptance.get(ac, (True,))[0]
        _acceptance[ac] = (ok, report.acceptance_title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        report.acceptance = marker.args[0]
        report.acceptance_title = marker.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(_acceptance, key=lambda a: int(a[2:])):
        ok, title = _acceptance[ac]
        terminalreporter.write_line("%-5s %s  %s" % (ac, "PASS" if ok else "FAIL", title))


@pytest.fixture
def drbg():
    return crypto.Drbg(b"tests")


@pytest.fixture
def store(drbg):
    return new_store(drbg)


@pytest.fixture
def ra():
    return RegistrationAuthority.generate(crypto.Drbg(b"ra"))


@pytest.fixture
def booted(store):
    pcr_extend(store, 0, crypto.hash(b"firmware v1"))
    return store


@pytest.fixture
def helper(booted, ra):
    h = EidHelper(booted, ra)
    h.puk_text = h.provision(PIN)
    return h
