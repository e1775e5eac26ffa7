import numpy as np
import pytest

from stkg.core import EntityVocab
from stkg.embedding import init_table
from stkg.training import SparseGrads, dense_grads


def small_vocab(n_users=3, n_pois=5, n_cat=(3, 2, 2), bins_per_day=4):
    return EntityVocab(
        users=tuple(f"u{i}" for i in range(n_users)),
        pois=tuple(f"p{i}" for i in range(n_pois)),
        cat1=tuple(f"f{i}" for i in range(n_cat[0])),
        cat2=tuple(f"m{i}" for i in range(n_cat[1])),
        cat3=tuple(f"c{i}" for i in range(n_cat[2])),
        bins_per_day=bins_per_day,
    )


def random_table(vocab, d=4, alpha=0.5, seed=0, scale=1.0):
    return init_table(vocab, d=d, alpha=alpha, seed=seed, init_scale=scale)


def check_gradient(loss_fn, table, n_probe=40, h=1e-5, seed=0):
    """Compare analytic gradients against central differences on random coordinates."""
    grads = SparseGrads()
    loss_fn(table, grads)
    sparse = grads.finalize()
    analytic = dense_grads(sparse, table)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in table.params().items():
        if arr.size == 0:
            continue
        touched = sparse[name][0] if name in sparse else np.zeros(0, dtype=np.int64)
        for _ in range(n_probe):
            # mostly rows the loss reaches, some elsewhere to confirm zeros
            if len(touched) and rng.random() < 0.75:
                row = int(rng.choice(touched))
            else:
                row = int(rng.integers(0, arr.shape[0]))
            idx = (row, int(rng.integers(0, arr.shape[1])))
            for part, unit in (("re", 1.0), ("im", 1j)):
                orig = arr[idx]
                arr[idx] = orig + h * unit
                up = loss_fn(table, None)
                arr[idx] = orig - h * unit
                down = loss_fn(table, None)
                arr[idx] = orig
                numeric = (up - down) / (2 * h)
                g = analytic[name][idx]
                got = g.real if part == "re" else g.imag
                err = abs(got - numeric) / max(1e-6, abs(numeric), abs(got))
                worst = max(worst, err)
    return worst


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def vocab():
    return small_vocab()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
