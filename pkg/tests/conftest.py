from __future__ import annotations

import socket
from pathlib import Path

import numpy as np
import pytest

from circstate.config import McmcConfig
from circstate.data import Dataset, write_dataset
from circstate.mcmc import AcceptanceTally, ChainState, GibbsSampler
from circstate.model import LookupGrid, ModelParams, PriorSpec, build_grid, generate_path


@pytest.fixture(autouse=True)
def no_network(monkeypatch: pytest.MonkeyPatch) -> None:
    def guard(*_args: object, **_kwargs: object) -> None:
        msg = "Tests must not perform network I/O."
        raise AssertionError(msg)

    monkeypatch.setattr(socket, "create_connection", guard)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240101)


@pytest.fixture
def prior() -> PriorSpec:
    return PriorSpec.defaults()


@pytest.fixture
def tiny_params() -> ModelParams:
    return ModelParams(
        beta_f=(0.2, 0.01, 0.5, -0.3),
        beta_g=(2.5, 0.04, 1.0, 1.0),
        sigma2_eps=0.05,
        sigma2_eta=0.1,
        sigma2_f=0.5,
        sigma2_g=1.0,
    )


@pytest.fixture
def tiny_grid() -> LookupGrid:
    return build_grid(4, (1.0, 4.0), "time_scaled", 1.0, np.random.default_rng(3))


@pytest.fixture
def tiny_series(tiny_grid: LookupGrid, tiny_params: ModelParams, prior: PriorSpec) -> np.ndarray:
    _, _, y = generate_path(3, tiny_grid, tiny_params, prior, np.random.default_rng(11))
    return y


@pytest.fixture
def tiny_sampler(tiny_series: np.ndarray, prior: PriorSpec) -> GibbsSampler:
    return GibbsSampler(tiny_series, prior, McmcConfig(n_iter=20, burn_in=0))


@pytest.fixture
def tiny_state(tiny_sampler: GibbsSampler, tiny_grid: LookupGrid) -> ChainState:
    return warm_state(tiny_sampler, tiny_grid)


def warm_state(sampler: GibbsSampler, grid: LookupGrid, sweeps: int = 3) -> ChainState:
    """A chain state a few sweeps away from its deterministic start."""
    rng = np.random.default_rng(5)
    state = sampler.initial_state(grid, 1.0, 0.1, rng)
    tally = AcceptanceTally()
    for i in range(sweeps):
        sampler.sweep(state, rng, tally, i + 1)
    return state


@pytest.fixture
def dataset_file(tmp_path: Path) -> Path:
    t = np.arange(1, 13, dtype=float)
    y = 0.3 * np.sin(t) + 0.05 * t
    theta = np.mod(0.4 * t, 2 * np.pi)
    return write_dataset(tmp_path / "dataset.csv", Dataset(t, y, true_theta=theta), {"seed": 1})
