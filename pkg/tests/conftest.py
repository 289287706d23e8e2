"""Shared fixtures.

The trained ReachAvoid artifacts are expensive (a couple of minutes of CPU),
so they are built once per session with the shipped default config and shared
by the guide, planner, harness and acceptance tests.
"""
import time

import numpy as np
import pytest

from budgetplan import envs, harness, oracle


@pytest.fixture(scope="session")
def grid_data():
    """500 epsilon-greedy episodes on the deterministic grid, plus the exact
    enumeration table."""
    env = envs.make_env("gridbudget")
    beh = envs.make_behavior(env, "epsilon-greedy")
    ds = envs.collect(env, beh, 500, np.random.default_rng(0),
                      behavior="epsilon-greedy")
    table = oracle.build_table(env, ds)
    return env, ds, table


@pytest.fixture(scope="session")
def slip_data():
    env = envs.make_env("gridbudget-slip")
    beh = envs.make_behavior(env, "epsilon-greedy")
    ds = envs.collect(env, beh, 500, np.random.default_rng(0),
                      behavior="epsilon-greedy")
    table = oracle.build_table(env, ds)
    return env, ds, table


@pytest.fixture(scope="session")
def ra_artifacts():
    """Trained ReachAvoid model/guides/dataset under the shipped defaults.

    Returns (config, artifacts, build_seconds); build time is charged to the
    acceptance criterion that first needs a trained model.
    """
    cfg = harness.default_config("reachavoid")
    t0 = time.monotonic()
    art = harness.build_artifacts(cfg)
    return cfg, art, time.monotonic() - t0
