import numpy as np
import pytest

from modest.data import FeatureStore, from_pairs

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def toy_dataset(num_users=6, num_items=10, per_user=5, seed=0):
    """Small dataset with a fixed 3/1/1 split per user."""
    rng = np.random.default_rng(seed)
    pairs, tags = [], []
    for u in range(num_users):
        items = rng.choice(num_items, size=per_user, replace=False)
        for k, i in enumerate(items):
            pairs.append((f"u{u}", f"i{i}"))
            tags.append("train" if k < per_user - 2 else ("valid" if k == per_user - 2 else "test"))
    order = [f"i{i}" for i in range(num_items)]
    return from_pairs(pairs, tags, item_order=order)


def toy_store(num_items=10, dims=(3, 4), seed=0):
    rng = np.random.default_rng(seed)
    return FeatureStore(("v", "t")[:len(dims)], tuple(rng.standard_normal((num_items, d)) for d in dims))


@pytest.fixture
def ds():
    return toy_dataset()


@pytest.fixture
def store():
    return toy_store()
