import os

import pytest
import torch

from errl.policy import PolicyConfig, build_policy
from errl.routing import Kind

torch.set_num_threads(int(os.environ.get("ERRL_THREADS", "1")))


def tiny_policy(kind=Kind.TSP, seed=0, dtype=torch.float64):
    cfg = PolicyConfig(kind=kind, embed_dim=8, num_layers=1, num_heads=2, ff_dim=16)
    return build_policy(cfg, seed=seed, dtype=dtype)


@pytest.fixture
def tiny_tsp_policy():
    return tiny_policy(Kind.TSP)


@pytest.fixture
def tiny_cvrp_policy():
    return tiny_policy(Kind.CVRP)


_CRITERIA: list[str] = []


def record_criterion(key, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {title} :: {detail}"
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
