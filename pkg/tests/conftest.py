import numpy as np
import pytest

from moras import tensor as T


def central_difference(f, x: np.ndarray, h: float, index=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``x`` (modified in place)."""
    grad = np.zeros_like(x)
    positions = np.ndindex(*x.shape) if index is None else index
    for pos in positions:
        old = x[pos]
        x[pos] = old + h
        fp = f()
        x[pos] = old - h
        fm = f()
        x[pos] = old
        grad[pos] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    """Max absolute difference normalised by the larger tensor's max magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return float(np.abs(a - b).max(initial=0) / scale)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


# ---------------------------------------------------------------------------
# shared desk-scale models (trained once per session)
# ---------------------------------------------------------------------------

DESK_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def desk_config():
    from moras.harness import RunConfig
    return RunConfig()


@pytest.fixture(scope="session")
def desk_splits(desk_config):
    from moras.harness import load_splits
    return load_splits(desk_config)


@pytest.fixture(scope="session")
def desk_settings(desk_config, desk_splits):
    ds = desk_splits.train
    return desk_config.settings(ds.class_count, ds.shape[0])


@pytest.fixture(scope="session")
def desk_clean_models(desk_splits, desk_settings):
    """Five clean-trained desk models, one random architecture per seed."""
    from dataclasses import replace

    from moras.genome import random_genome
    from moras.objectives import train_genome
    from moras.rng import stream

    cfg = replace(desk_settings.train, mode="clean")
    return [train_genome(random_genome(stream(seed, "desk-arch")), desk_splits.train,
                         desk_settings, seed, cfg) for seed in DESK_SEEDS]


@pytest.fixture(scope="session")
def desk_substitute(desk_splits, desk_settings):
    from moras.objectives import train_substitute
    return train_substitute(desk_splits.train, desk_settings, seed=99)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
