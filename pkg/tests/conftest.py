import os

# bit-identical reruns need a single BLAS thread
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from amtpp.config import TrainConfig
from amtpp.data import TripRecord, UserSequence
from amtpp.model import AMTPP, init_params

ACCEPTANCE_LINES: list[str] = []


def micro_config(**overrides) -> TrainConfig:
    """The small model used for gradient checks: S=5, K=2, rank 2, c_model 8, two heads."""
    base = dict(num_stations=5, K=2, rank=2, c_model=8, n_heads=2, c_k=3, c_v=3,
                J_o=4, J_d=4, J_h=4, J_w=4, batch_size=2, seed=3, init_pos_scale=10000.0)
    base.update(overrides)
    return TrainConfig(**base)


def make_sequence(uid: str, stamps_hours, pairs, start: int = 1499040000) -> UserSequence:
    trips = [TripRecord(uid, start + int(round(h * 3600)), o, d) for h, (o, d) in zip(stamps_hours, pairs)]
    return UserSequence(uid, trips)


def micro_users() -> list[UserSequence]:
    return [
        make_sequence("a", [7.9, 16.2, 31.7], [(0, 1), (1, 0), (0, 1)]),
        make_sequence("b", [9.3, 12.8, 40.1], [(2, 3), (3, 4), (4, 2)]),
    ]


def micro_model(**overrides) -> AMTPP:
    cfg = micro_config(**overrides)
    return AMTPP(cfg, init_params(cfg, np.random.default_rng(cfg.seed)))


@pytest.fixture
def micro():
    return micro_model()


@pytest.fixture
def users():
    return micro_users()


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
