import pytest

from wispike.csi_data import generate_benchmark


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    """4 single-action classes, 16 train / 4 test samples each."""
    root = tmp_path_factory.mktemp("small_bench")
    generate_benchmark(root, n_atoms=4, per_class=20, actions=1, seed=1)
    return root / "manifest.csv"


@pytest.fixture
def quick_config(small_bench):
    from wispike.training import default_config

    cfg = default_config()
    cfg.epochs = 2
    cfg.batch_size = 16
    cfg.manifest = str(small_bench)
    return cfg


class TrainedRun:
    """The acceptance-scale single-action run, trained once per session."""

    def __init__(self, manifest, config, result, seconds):
        self.manifest, self.config, self.result, self.seconds = manifest, config, result, seconds

    @property
    def rundir(self):
        return self.result.checkpoint.parent


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    import time

    from wispike.training import default_config, train

    root = tmp_path_factory.mktemp("desk_run")
    generate_benchmark(root / "data", n_atoms=4, per_class=250, actions=1, seed=0, test_fraction=0.2)
    cfg = default_config()
    cfg.manifest = str(root / "data" / "manifest.csv")
    start = time.perf_counter()
    result = train(cfg, root / "run")
    return TrainedRun(root / "data" / "manifest.csv", cfg, result, time.perf_counter() - start)


# one pass/fail line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
