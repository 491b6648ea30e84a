import numpy as np
import pytest
import torch

from mmgcd.data import build_gcd_split, make_synthetic_dataset, split_arrays
from mmgcd.encoders import SyntheticOracleEncoders
from mmgcd.presets import TOY_TES, standard_spec
from mmgcd.tes import TextEmbeddingSynthesizer

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth():
    """Standard synthetic set: 8 classes x 20, 4 old classes, half labeled."""
    dataset, oracle = make_synthetic_dataset(standard_spec(seed=0))
    split = build_gcd_split(dataset, 4, 0.5, seed=0)
    X, y_semi, y_true, ids = split_arrays(dataset, split)
    enc = SyntheticOracleEncoders(oracle)
    return dict(dataset=dataset, oracle=oracle, split=split, X=X, y_semi=y_semi,
                y_true=y_true, ids=ids, enc=enc)


@pytest.fixture(scope="session")
def toy_tes(synth):
    return TextEmbeddingSynthesizer(synth["enc"], view_noise=synth["oracle"].spec.view_noise,
                                    seed=0, **TOY_TES).fit(synth["X"], synth["y_semi"])


@pytest.fixture(scope="session")
def quick_tes(synth):
    """A briefly trained synthesizer for tests that only need a fitted model."""
    return TextEmbeddingSynthesizer(synth["enc"], epochs=20, batch_size=32, learning_rate=0.003,
                                    seed=0).fit(synth["X"], synth["y_semi"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
