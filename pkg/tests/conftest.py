import numpy as np
import pytest


def rand_spd(rng, n, shape=(), cond=10.0):
    """Random SPD matrices with eigenvalues spread over ``[1, cond]``."""
    q, _ = np.linalg.qr(rng.standard_normal(shape + (n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), size=shape + (n,)))
    return (q * lam[..., None, :]) @ np.swapaxes(q, -1, -2)


def rand_sym(rng, n, shape=()):
    a = rng.standard_normal(shape + (n, n))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def fd_grad(fun, x, h=1e-5):
    """Central-difference gradient of the scalar function ``fun`` at ``x``."""
    x = np.array(x, dtype=np.float64, order="C")
    g = np.zeros(x.shape)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fun(x)
        flat[i] = old - h
        fm = fun(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance and echoed at the end
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line[1])
