import os

import numpy as np
import pytest
import torch

from ntljb.domains import DomainPair, ImageSet, load_domain_pair

torch.set_num_threads(1)

DATA_ROOT = os.environ.get("NTLJB_DATA_ROOT")


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    return DATA_ROOT or str(tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="session")
def digits_pair(data_root):
    return load_domain_pair("digits_small", 32, data_root=data_root)


def _head(s: ImageSet, n: int) -> ImageSet:
    return s.subset(np.arange(min(n, len(s))))


@pytest.fixture(scope="session")
def tiny_pair(digits_pair):
    """A few hundred images per split at 16×16, for fast unit tests."""
    from ntljb.domains import _resize_uint8

    def shrink(s, n):
        s = _head(s, n)
        hwc = np.transpose(s.pixels, (0, 2, 3, 1))
        return ImageSet(_resize_uint8(hwc, 16), s.labels)

    p = digits_pair
    return DomainPair("tiny", shrink(p.authorized_train, 400), shrink(p.authorized_test, 100),
                      shrink(p.unauthorized_train, 200), shrink(p.unauthorized_test, 100), p.class_names, 16)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_record():
    def record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[criterion])

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
