import time

import numpy as np
import pytest

from latticeflow.data import SceneSpec, gen_scene, preprocess
from latticeflow.model import NetworkConfig, SceneFlowNet, evaluate, fit_base_scale, train_recipe

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, ok, text):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class LearningFixture:
    """Five training pairs and twenty held-out pairs at 2048 points per frame."""

    points = 2048

    def __init__(self, spec=None):
        self.spec = spec or SceneSpec()
        self.train_seeds = list(range(5))
        self.held_seeds = list(range(1000, 1020))
        self.train = [preprocess(gen_scene(self.spec, s), n_samples=self.points, seed=s) for s in self.train_seeds]
        self.held = [preprocess(gen_scene(self.spec, s), n_samples=self.points, seed=s) for s in self.held_seeds]
        self.base_scale = fit_base_scale(self.train)
        self.cfg = NetworkConfig(base_scale=self.base_scale)
        self.models = {}

    def held_at(self, n):
        """The held-out scenes re-sampled with at least n raw points, then n per frame."""
        out = []
        for s in self.held_seeds:
            n0 = gen_scene(self.spec, s).n1
            mult = max(1.0, 1.25 * n / n0)
            out.append(preprocess(gen_scene(self.spec, s, density_mult=mult), n_samples=n, seed=s))
        return out

    def model(self, name="full"):
        if name not in self.models:
            cfg = self.cfg if name == "full" else self.cfg.replace(**{name: True})
            initial = evaluate(SceneFlowNet(cfg), self.train)
            t0 = time.perf_counter()
            state, curve = train_recipe(self.train, cfg, seed=0)
            self.models[name] = dict(net=state.net, curve=curve, seconds=time.perf_counter() - t0,
                                     initial=initial, steps=state.step)
        return self.models[name]


@pytest.fixture(scope="session")
def learning():
    return LearningFixture()
