import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qdeploy.manifest import parse_manifest  # noqa: E402

TINY = """
format = "qdeploy-manifest"
version = 1
name = "tiny"
scheme = "symmetric_pow2"
preprocess = "batch_norm_like"

[input]
shape = [8, 8, 3]

[[layers]]
kind = "conv2d"
name = "conv1"
out_channels = 4
kernel = 3
padding = 1
activation = "relu"

[[layers]]
kind = "maxpool"
name = "pool1"
window = 2

[[layers]]
kind = "relu"
name = "relu1"

[[layers]]
kind = "fully_connected"
name = "fc1"
out_features = 2
"""


@pytest.fixture
def tiny_manifest():
    return parse_manifest(TINY)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
