import numpy as np
import pytest
from hypothesis import settings, strategies as st

from rangevio import geom
from rangevio.state import RobotState

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def unit_quats(draw):
    v = draw(st.tuples(*[st.floats(-1.0, 1.0) for _ in range(4)]))
    v = np.array(v)
    if np.linalg.norm(v) < 1e-3:
        v = np.array([1.0, 0.0, 0.0, 0.0])
    return geom.normalize(v)


def random_quat(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def random_state(rng, stamp=0.0, scale=3.0):
    return RobotState(rng.uniform(-scale, scale, 3), rng.uniform(-2, 2, 3), random_quat(rng),
                      rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3), stamp)


def numeric_jacobian(f, x, n, plus=None, eps=1e-6):
    """Central differences of ``f`` at ``x`` along an ``n``-dim tangent ``plus(x, dx)``."""
    plus = plus or (lambda x, d: x + d)
    cols = []
    for k in range(n):
        d = np.zeros(n)
        d[k] = eps
        cols.append((np.atleast_1d(f(plus(x, d))) - np.atleast_1d(f(plus(x, -d)))) / (2 * eps))
    return np.stack(cols, axis=-1)


def rel_err(A, B):
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(B), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance lines

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one ``PASS``/``FAIL`` line per acceptance criterion; echoed in the summary."""

    def record(tag, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {tag}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
