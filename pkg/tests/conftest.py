"""Shared fixtures of the test suite."""

from pathlib import Path

import numpy as np
import pytest

from averaging.fastslow import CouplingTerm, SlowField
from averaging.maps import FastFamily


@pytest.fixture
def doubling() -> FastFamily:
    return FastFamily("doubling-drift", {"beta": 1.0, "drift": 1.0})


@pytest.fixture
def lsv() -> FastFamily:
    return FastFamily("lsv-intermittent", {"a0": 0.5, "slope": 1.0}, eps0=0.5)


@pytest.fixture
def cos_field() -> SlowField:
    return SlowField(d=1, x0=np.zeros(1), terms=[CouplingTerm(psi="cos2pi")], L1=1.0)


@pytest.fixture
def coupled_field() -> SlowField:
    """A two-dimensional field whose second component reads x_1."""
    return SlowField(
        d=2,
        x0=np.array([0.0, 0.5]),
        terms=[
            CouplingTerm(component=0, psi="cos2pi"),
            CouplingTerm(component=1, coef=0.5, phi="sin", x_index=0, psi="linear"),
        ],
        L1=2.0,
        L2=1.0,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


SMALL_SCENARIO = """
name = "small"

[family]
kind = "doubling-drift"
beta = 1.0
drift = 1.0

[field]
d = 1
x0 = [0.0]
L1 = 1.0

[[field.terms]]
psi = "cos2pi"

[run]
eps = [0.0625, 0.03125, 0.015625]
q = [1.0, 2.0]
seed = 7
ulam_bins = 256

[ensemble]
law = "lebesgue"
size = 24

[rates]
z_slope = [0.0, 1.5]

[counterexample]
beta = 1.0
deltas = [0.01]
y0 = [0.3]
random_size = 100
random_bound = 0.5
"""


@pytest.fixture
def scenario_file(tmp_path) -> Path:
    """A small doubling scenario writing under tmp_path."""
    path = tmp_path / "small.toml"
    text = SMALL_SCENARIO + f'\n[output]\ndir = "{(tmp_path / "out").as_posix()}"\n'
    path.write_text(text, encoding="utf-8")
    return path
