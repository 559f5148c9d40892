import sys

import numpy as np
import pytest

from fclvit.model import FCLViT, FCLViTConfig
from fclvit.tensor import Rng


def central_diff(f, arr, h=1e-6, idx=None):
    """Central finite differences of scalar f() wrt entries of ``arr`` (mutated in place
    and restored). ``idx``: iterable of flat indices, default all."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if idx is None else idx
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.fixture
def tiny_config():
    return FCLViTConfig(depth=2, dim=8, heads=2, dropout=0.5, image_side=4, patch_side=2,
                        channels=1)


@pytest.fixture
def tiny_model(tiny_config):
    return FCLViT(tiny_config, Rng(11))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid, ok, detail in sorted(mod.RESULTS, key=lambda r: (len(str(r[0])), str(r[0]))):
        tr.write_line(f"{'PASS' if ok else 'FAIL'} criterion {cid}: {detail}")
