import sys

import pytest
import torch

from posesynth.body import make_template
from posesynth.data import GeneratorConfig, generate_dataset, load_sequence

torch.set_num_threads(1)

TINY = GeneratorConfig(resolution=64, n_views=2, n_frames=3, tex_size=32)


@pytest.fixture(scope="session")
def template():
    return make_template()


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    return generate_dataset(tmp_path_factory.mktemp("tiny") / "data", n_train=1, n_test=1, seed=0, config=TINY)


@pytest.fixture(scope="session")
def tiny_sequence(tiny_manifest):
    return load_sequence(tiny_manifest, 0, frames=[0, 1])


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in sys.modules.items() if name.rsplit(".", 1)[-1] == "test_acceptance"), None)
    results = getattr(mod, "RESULTS", None)
    if results is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        if n in results:
            title, ok, detail = results[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2} {title}: {detail}")
        else:
            terminalreporter.write_line(f"[----] {n:>2} not run")
