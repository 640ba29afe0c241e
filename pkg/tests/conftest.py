import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_marks: dict[str, list[int]] = {}
_criteria: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(tryfirst=True)
def pytest_collection_modifyitems(items):
    for item in items:
        ids = [m.args[0] for m in item.iter_markers("criterion")]
        if ids:
            _marks[item.nodeid] = ids


def pytest_runtest_logreport(report):
    if report.nodeid not in _marks:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        for n in _marks[report.nodeid]:
            _criteria.setdefault(n, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _criteria[n]
        status = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status} ({len(outcomes)} checks)")


TINY_TRAIN = {
    "space": "nb101", "max_vertices": 4, "max_edges": 4, "neighbor_cap": 8, "episode_length": 8,
    "batch_size": 16, "learning_starts": 64, "train_every": 8, "target_sync": 20, "publish_every": 5,
    "capacity": 2000, "shards": 2, "workers": 2, "envs_per_worker": 2, "latent": 16, "heads": 2, "blocks": 1,
    "total_timesteps": 400, "log_every": 200, "checkpoint_every": 400, "lr": 1e-3, "seed": 3,
}


def run_cli(*args, cwd=None, check=True):
    import subprocess

    proc = subprocess.run([sys.executable, "-m", "incnas", *map(str, args)], cwd=cwd,
                          capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"incnas {' '.join(map(str, args))} failed:\n{proc.stderr}")
    return proc


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A checkpoint produced by ``incnas train`` on a tiny space."""
    import json

    root = tmp_path_factory.mktemp("tiny_train")
    cfg = root / "train.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    out = json.loads(run_cli("train", "--config", cfg, "--out-dir", root / "run").stdout)
    return Path(out["checkpoints"][-1])
