import os

import hypothesis
import numpy as np
import pytest

from expr_core import Const, Inverse, Product, ScaledVar, Signature, Sum, Var, VarKind

hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

collect_ignore = ["examples"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: large-N acceptance runs (deselect with -m 'not slow')")


def _coefficient(rng: np.random.Generator) -> complex:
    return complex(rng.normal(), rng.normal()) / np.sqrt(2.0) + 0.5


def random_expression(rng: np.random.Generator, signature: Signature, max_depth: int):
    """Random scalar-valued expression tree of depth at most ``max_depth``."""
    if max_depth <= 1 or rng.random() < 0.25:
        if rng.random() < 0.2:
            return Const(_coefficient(rng))
        var = signature.variables()[rng.integers(len(signature.variables()))]
        return ScaledVar(_coefficient(rng), var)
    choice = rng.random()
    if choice < 0.35:
        return Sum(random_expression(rng, signature, max_depth - 1), random_expression(rng, signature, max_depth - 1))
    if choice < 0.7:
        return Product(random_expression(rng, signature, max_depth - 1), random_expression(rng, signature, max_depth - 1))
    return Inverse(random_expression(rng, signature, max_depth - 1))


@pytest.fixture
def expr_factory():
    """``make(seed) -> (expr, signature)`` with d1, d2 <= 2 and depth <= 5."""

    def make(seed: int, max_depth: int = 5):
        rng = np.random.default_rng(seed)
        while True:
            d1, d2 = int(rng.integers(0, 3)), int(rng.integers(0, 3))
            if d1 + d2 >= 1:
                break
        signature = Signature(d1, d2)
        return random_expression(rng, signature, max_depth), signature

    return make


@pytest.fixture
def x1():
    return ScaledVar(1.0, Var(VarKind.SELFADJOINT, 1))


@pytest.fixture
def x2():
    return ScaledVar(1.0, Var(VarKind.SELFADJOINT, 2))


@pytest.fixture
def u1():
    return ScaledVar(1.0, Var(VarKind.UNITARY, 1))
