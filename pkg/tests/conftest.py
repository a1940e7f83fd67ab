"""Shared fixtures.

The expensive piece is the pinned task battery: one federated run per seed
of the default plan (3 clients, bars 16x16, default architecture, 15
rounds) with CRN accumulators for windows 5 and 10 plus, on demand, a twin
run with CRN disabled. Runs are cached for the whole session because the
trend checks and several regression tests all read from the same states.
"""

from dataclasses import replace

import numpy as np
import pytest

from fedadv.experiment import ExperimentPlan, _build_task
from fedadv.federation import run_federation
from fedadv.model import (
    conv2d,
    dense,
    flatten,
    init_params,
    make_architecture,
    maxpool2,
    relu,
)
from fedadv.rng import derive_rng


def tiny_arch():
    """Small but complete stack: conv, relu, pool, flatten, dense."""
    return make_architecture(
        [conv2d(2, 3), relu(), maxpool2(), flatten(), dense(3)], (1, 8, 8))


def rand_params(arch, seed=0):
    return init_params(arch, derive_rng(seed, "test-params"))


def rand_images(shape, seed=0, tag="test-images"):
    return derive_rng(seed, tag).uniform(0.05, 0.95, size=shape)


class PinnedRuns:
    """Lazy per-seed cache of pinned-task federations."""

    def __init__(self):
        self.plan = ExperimentPlan()
        self.arch = self.plan.architecture()
        self._cache = {}

    def get(self, seed, with_crn=True):
        key = (seed, with_crn)
        if key not in self._cache:
            fed = replace(self.plan.fed, seed=seed, adversary_id=0)
            train, part, eval_set, tests = _build_task(self.plan, seed)
            state = run_federation(
                fed, self.arch, train, part, eval_set=eval_set,
                attack_test=tests[0],
                crn_configs=self.plan.crn if with_crn else ())
            self._cache[key] = {
                "state": state, "eval": eval_set, "tests": tests,
                "fed": fed,
            }
        return self._cache[key]


@pytest.fixture(scope="session")
def pinned():
    return PinnedRuns()


@pytest.fixture
def rng():
    return np.random.default_rng(7)
