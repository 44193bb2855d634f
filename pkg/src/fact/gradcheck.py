"""Central finite-difference gradient checking."""
import numpy as np

from fact.tensor import backward


def numerical_grad(fn, param, eps=1e-3, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param.data``.

    ``indices`` restricts the probe to a list of flat indices; the returned
    array is then aligned with that list.
    """
    flat = param.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    out = np.zeros(len(probe) if indices is not None else flat.size, dtype=np.float64)
    for n, i in enumerate(probe):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn().item()
        flat[i] = orig - eps
        f_minus = fn().item()
        flat[i] = orig
        out[n] = (f_plus - f_minus) / (2.0 * eps)
    return out if indices is not None else out.reshape(param.shape)


def analytic_grads(fn, params):
    for p in params:
        p.zero_grad()
    backward(fn())
    return [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn, params, eps=1e-3, rtol=1e-3, atol=1e-8, max_entries=None, seed=0):
    """Compare analytic and numerical gradients.

    An entry passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``. Returns
    ``(ok, worst_relative_error, entries_checked)``.
    """
    grads = analytic_grads(fn, params)
    rng = np.random.default_rng(seed)
    worst, checked, ok = 0.0, 0, True
    for p, g in zip(params, grads):
        size = p.data.size
        if max_entries is not None and size > max_entries:
            idx = sorted(rng.choice(size, size=max_entries, replace=False).tolist())
        else:
            idx = list(range(size))
        num = numerical_grad(fn, p, eps=eps, indices=idx)
        ana = g.reshape(-1)[idx]
        diff = np.abs(ana - num)
        bound = atol + rtol * np.maximum(np.abs(ana), np.abs(num))
        ok &= bool(np.all(diff <= bound))
        worst = max(worst, float(relative_error(ana, num).max(initial=0.0)))
        checked += len(idx)
    return ok, worst, checked
