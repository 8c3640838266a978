"""Shipped policy files and the golden digest corpus.

``golden.json`` holds, per case, the inputs and the expected policyDigest
after every step. Its schema is described in ``docs/golden-corpus.md``.
"""
import json
from importlib import resources

GOLDEN = "golden.json"


def policy_names():
    return sorted(p.name[:-4] for p in resources.files(__name__).iterdir() if p.name.endswith(".pol"))


def policy_source(name: str) -> str:
    return resources.files(__name__).joinpath(name + ".pol").read_text(encoding="utf-8")


def golden() -> dict:
    return json.loads(resources.files(__name__).joinpath(GOLDEN).read_text(encoding="utf-8"))
