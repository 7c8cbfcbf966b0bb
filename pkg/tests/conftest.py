import numpy as np
import pytest


def central_difference(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f with respect to every element."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def assert_grads_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4):
    """Relative error below rtol where gradients are large, absolute elsewhere."""
    np.testing.assert_array_less(
        np.abs(analytic - numeric),
        rtol * np.maximum(1.0, np.abs(numeric)) + 1e-18,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
