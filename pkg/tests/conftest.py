import numpy as np
import pytest

from fusedhead import Dims, HeadInputs


def naive_matmul_bt_f64(a, bmat, bias=None):
    """Triple-loop float64 oracle for matmul_bt."""
    m, k = a.shape
    n, _ = bmat.shape
    out = np.zeros((m, n), np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += float(a[i, kk]) * float(bmat[j, kk])
            if bias is not None:
                acc += float(bias[j])
            out[i, j] = acc
    return out


@pytest.fixture
def small_instance():
    dims = Dims(2, 3, 4, 5)
    mask = np.array([[1, 1, 0], [1, 1, 1]], np.uint8)
    return HeadInputs.seeded(dims, 42, mask=mask)
