import numpy as np
import pytest
from hypothesis import settings

from tree_power import sim
from tree_power.sim import ChannelMoments

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_cfg():
    """Two APs with two antennas each; cheap enough for Monte-Carlo checks."""
    return sim.NetworkConfig(L=2, N=2, K=2, mc_realizations=200)


@pytest.fixture
def small_stats(small_cfg):
    r = np.random.default_rng(7)
    ap, ue = sim.generate_layout(small_cfg, r)
    return sim.channel_statistics(ap, ue, small_cfg, r)


def make_moments(side, a, B, c):
    a = np.asarray(a, dtype=float)
    B = np.asarray(B, dtype=float)
    c = np.asarray(c, dtype=float)
    z = np.zeros_like(a)
    return ChannelMoments(side=side, a=a, B=B, c=c, a_se=z, B_se=np.zeros_like(B), c_se=z)


# --------------------------------------------------------------------------
# desk-scale pipeline shared by the CLI and acceptance suites
# --------------------------------------------------------------------------

DESK_TRAIN_SEED = 1234
DESK_TEST_SEED = 98765
DESK_FIT_SEED = 0

ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Generate the desk corpus and test split, then train 30 epochs, all through the CLI."""
    from tree_power.cli import main

    root = tmp_path_factory.mktemp("desk")
    paths = dict(train=root / "train.jsonl", test=root / "test.jsonl", model=root / "model.ttpm")
    assert main(["generate", "--preset", "desk", "--seed", str(DESK_TRAIN_SEED),
                 "--out", str(paths["train"])]) == 0
    assert main(["generate", "--preset", "desk", "--split", "test", "--seed", str(DESK_TEST_SEED),
                 "--out", str(paths["test"])]) == 0
    assert main(["train", "--preset", "desk", "--seed", str(DESK_FIT_SEED), "--data", str(paths["train"]),
                 "--out", str(paths["model"])]) == 0
    paths["loss"] = root / "model_loss.csv"
    return paths


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
