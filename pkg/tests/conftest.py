import numpy as np
import pytest


def numerical_gradient(f, x, h=1e-3):
    """Central differences of scalar ``f()`` wrt every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)))


def naive_conv(x, w, b, stride):
    """Direct sliding-window cross-correlation with symmetric zero padding."""
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    pad = k // 2
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for bi in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                r = i * stride + di - pad
                                s = j * stride + dj - pad
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, ci, r, s] * w[o, ci, di, dj]
                    out[bi, o, i, j] = acc
    return out


def brute_counts(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
