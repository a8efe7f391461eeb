import time
from types import SimpleNamespace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mvspl.geometry import Camera
from mvspl.scene_io import Config
from mvspl.self_training import initialize, run_iteration
from mvspl.synthetic import generate_synthetic_scene

K100 = np.array([[100.0, 0.0, 50.0], [0.0, 100.0, 50.0], [0.0, 0.0, 1.0]])

_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def random_camera(rng, d_min=0.5, d_max=20.0) -> Camera:
    f = rng.uniform(50, 800)
    K = np.array([[f, 0.0, rng.uniform(20, 300)], [0.0, f * rng.uniform(0.9, 1.1), rng.uniform(20, 300)],
                  [0.0, 0.0, 1.0]])
    R = Rotation.random(random_state=rng).as_matrix()
    return Camera(K, R, rng.normal(size=3), d_min, d_max)


@pytest.fixture(scope="session")
def plane_noise():
    return generate_synthetic_scene("plane", "noise")


@pytest.fixture(scope="session")
def sphere_noise():
    return generate_synthetic_scene("sphere", "noise")


@pytest.fixture(scope="session")
def plane_checker():
    return generate_synthetic_scene("plane", "checker")


@pytest.fixture(scope="session")
def plane_uniform():
    return generate_synthetic_scene("plane", "uniform")


@pytest.fixture(scope="session")
def sphere_run(sphere_noise):
    """States t = 0..3 of the default pipeline on the textured sphere, with wall time."""
    start = time.perf_counter()
    cfg = Config(iterations=3)
    states = [initialize(sphere_noise, cfg)]
    while states[-1].iteration < cfg.iterations:
        states.append(run_iteration(states[-1]))
    return SimpleNamespace(states=states, config=cfg, seconds=time.perf_counter() - start)


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, title: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_ACCEPTANCE):
        line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
