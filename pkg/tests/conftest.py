"""Shared fixtures: benchmark instances reused across the suite."""

import numpy as np
import pytest

from hjbverify import (
    AdvertisingParams,
    advertising_solution,
    make_advertising_problem,
    make_exit_demo,
)


@pytest.fixture(scope="session")
def adv_params():
    return AdvertisingParams(eta=0.5, alpha=1.0, beta=0.5, horizon=1.0)


@pytest.fixture(scope="session")
def adv_problem(adv_params):
    return make_advertising_problem(adv_params)


@pytest.fixture(scope="session")
def adv_solution(adv_params):
    return advertising_solution(adv_params)


@pytest.fixture(scope="session")
def exit_time_problem():
    """dy = dW on O = (0, 1), running cost 1, zero boundary/terminal data."""
    return make_exit_demo("expected_exit_time")


@pytest.fixture(scope="session")
def exit_constant_problem():
    return make_exit_demo("constant", constant_value=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
