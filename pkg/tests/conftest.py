import numpy as np

from bcsoftmax.cli import sample_instances

# relative-or-absolute tolerance, whichever is larger
EQ_TOL = 1e-9


def assert_close(actual, expected, tol=EQ_TOL, msg=""):
    actual = np.asarray(actual, dtype=float)
    expected = np.asarray(expected, dtype=float)
    scale = np.maximum(np.abs(actual), np.abs(expected))
    bound = np.maximum(tol, tol * scale)
    diff = np.abs(actual - expected)
    assert np.all(diff <= bound), (
        f"{msg} max diff {diff.max():.3e} exceeds tolerance {tol:g}; "
        f"actual={actual!r} expected={expected!r}"
    )


def random_instance(rng, k):
    """One (x, a, b) draw from the benchmark bound recipe."""
    x, a, b = sample_instances(rng, 1, k)
    return x[0], a[0], b[0]
