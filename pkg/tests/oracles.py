"""Independent reference computations used by the tests.

Nothing here imports the code paths it is used to check.
"""
import numpy as np

FD_STEP = 1e-4
GRAD_RTOL = 1e-4


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def directional_numeric(f, x: np.ndarray, v: np.ndarray, h: float = FD_STEP) -> float:
    old = x.copy()
    x[...] = old + h * v
    fp = f()
    x[...] = old - h * v
    fm = f()
    x[...] = old
    return (fp - fm) / (2 * h)


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_dice(a, b, k) -> float:
    """Set-based dice counting pixel coordinates one by one."""
    A = {(i, j) for i in range(a.shape[0]) for j in range(a.shape[1]) if a[i, j] == k}
    B = {(i, j) for i in range(b.shape[0]) for j in range(b.shape[1]) if b[i, j] == k}
    if not A and not B:
        return 1.0
    return 2 * len(A & B) / (len(A) + len(B))


def brute_evaluate(preds, truths, num_classes=4):
    per_class = {}
    for k in range(1, num_classes):
        scores = [brute_dice(t, p, k) for p, t in zip(preds, truths) if any(v == k for v in t.ravel())]
        if scores:
            per_class[k] = sum(scores) / len(scores)
    avg = sum(per_class.values()) / len(per_class) if per_class else float("nan")
    return per_class, avg


def sorted_percentile(values, pct) -> float:
    """Linear-interpolation percentile from a sorted copy (numpy's default rule)."""
    v = sorted(float(x) for x in np.ravel(values))
    pos = (len(v) - 1) * pct / 100.0
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def direct_conv2d(x, w, b, stride=1, padding=0):
    """Loop-based cross-correlation."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def empirical_cdf(values, x):
    v = np.sort(np.ravel(values))
    return np.searchsorted(v, x, side="right") / v.size


def scalar_adam(grad_fn, w0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    w, m, v = float(w0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return w
