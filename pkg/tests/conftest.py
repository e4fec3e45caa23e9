import numpy as np
import pytest


def naive_conv1d(x, w, b, groups, pad):
    """Definitional stride-1 grouped cross-correlation with zero padding."""
    B, cin, L = x.shape
    cout, cg, k = w.shape
    og = cout // groups
    xp = np.zeros((B, cin, L + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + L] = x
    lout = L + 2 * pad - k + 1
    out = np.zeros((B, cout, lout))
    for n in range(B):
        for o in range(cout):
            g = o // og
            for t in range(lout):
                acc = 0.0 if b is None else float(b[o])
                for i in range(cg):
                    for j in range(k):
                        acc += xp[n, g * cg + i, t + j] * w[o, i, j]
                out[n, o, t] = acc
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
