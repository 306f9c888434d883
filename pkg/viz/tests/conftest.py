"""Shared fixtures: real artifact directories produced by the pmnet CLI.

The plotting package only ever sees the files, never the simulator, so the
fixtures shell out to the installed console script.
"""

import subprocess

import matplotlib
import pytest

matplotlib.use("Agg")


def _pmnet(*args):
    proc = subprocess.run(["pmnet", *args], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


@pytest.fixture(scope="session")
def rhc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("artifacts") / "rhc"
    _pmnet("run", "--seed", "31", "--targets", "5", "--agents", "2",
           "--T", "6", "--controller", "rhc", "--timing", "--out", str(out))
    return out


@pytest.fixture(scope="session")
def bdc_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("artifacts") / "bdc"
    _pmnet("run", "--seed", "31", "--targets", "5", "--agents", "2",
           "--T", "6", "--controller", "bdc", "--out", str(out))
    return out


@pytest.fixture(scope="session")
def compare_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("artifacts") / "grid"
    _pmnet("compare", "--controllers", "rhc,bdc", "--reps", "1", "--seed",
           "40", "--targets", "5", "--T", "6", "--out", str(out))
    return out
