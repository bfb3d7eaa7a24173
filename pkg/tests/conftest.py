import pytest
import torch

from diffurec.approximator import ConditioningConfig, TransformerConfig, build_model
from diffurec.diffusion import DiffusionConfig, build_schedule
from diffurec.synthetic import copy_pattern_dataset

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    label = getattr(item.function, "acceptance_label", None)
    if label and rep.when == "call":
        ACCEPTANCE[label] = (rep.outcome, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0].lstrip("C"))):
        outcome, duration = ACCEPTANCE[label]
        verdict = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        terminalreporter.write_line(f"{verdict}  {label}  ({duration:.1f}s)")


@pytest.fixture(scope="session")
def toy_dataset():
    return copy_pattern_dataset(users=60, items=12, min_len=5, max_len=9, seed=3, max_seq=10)


@pytest.fixture
def tiny_model():
    def make(mode="sum", dtype=torch.float64, T=4, num_items=5, d=8, n=3, blocks=1, seed=0, **kw):
        tcfg = TransformerConfig(d=d, blocks=blocks, heads=2, max_len=n, dropout_attn_block=0.0,
                                 dropout_item_embedding=0.0, **kw)
        ccfg = ConditioningConfig(mode=mode, heads=2)
        return build_model(num_items, T, tcfg, ccfg, seed=seed, dtype=dtype)

    return make


@pytest.fixture
def small_schedule():
    return build_schedule(DiffusionConfig(T=4, beta_min=0.05, beta_max=0.3))
