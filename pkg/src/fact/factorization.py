"""Factorized weight increments over an ``M x d x d`` slice tensor.

Three formats are supported:

* Matrix-Batch (``mb``): every slice has its own low-rank pair,
  ``dW[i] = s * U[i] @ V[i]``.
* Tensor-Train (``tt``): shared side factors and a per-slice core,
  ``dW[i,j,k] = s * sum_{a,b} Sigma[i,a,b] U[j,a] V[k,b]``.
* Tucker (``tk``): a small core with one factor per mode,
  ``dW[i,j,k] = s * sum_{a,b,c} C[a,b,c] P[i,a] U[j,b] V[k,c]``.

``V`` starts at zero in every format, so a fresh factor set adds nothing to
the backbone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fact import tensor as T
from fact.tensor import AutoTensor

FORMATS = ("mb", "tt", "tk")
FORMAT_TAGS = {"mb": 0, "tt": 1, "tk": 2}
INIT_UNIFORM_INV_SQRT_RANK = 0

# trainable tensors of each format, in storage order
FACTOR_NAMES = {
    "mb": ("U", "V"),
    "tt": ("U", "V", "Sigma"),
    "tk": ("P", "U", "V", "C"),
}


class ConfigError(ValueError):
    """Invalid factorization configuration (format, ranks, sizes)."""


def normalize_ranks(fmt, ranks):
    """Return the canonical ``(r1, r2, r3)`` triple; unused entries are 0."""
    if fmt not in FORMATS:
        raise ConfigError(f"unknown factor format {fmt!r}; expected one of {FORMATS}")
    if isinstance(ranks, (int, np.integer)):
        r = int(ranks)
        return {"mb": (r, 0, 0), "tt": (r, r, 0), "tk": (r, r, r)}[fmt]
    ranks = tuple(int(x) for x in ranks)
    need = {"mb": 1, "tt": 2, "tk": 3}[fmt]
    if len(ranks) < need or any(ranks[need:]):
        raise ConfigError(f"format {fmt!r} takes {need} rank(s), got {ranks}")
    return ranks[:need] + (0,) * (3 - need)


def factor_shapes(fmt, M, d, ranks):
    r1, r2, r3 = normalize_ranks(fmt, ranks)
    if fmt == "mb":
        return {"U": (M, d, r1), "V": (M, r1, d)}
    if fmt == "tt":
        return {"U": (d, r1), "V": (d, r2), "Sigma": (M, r1, r2)}
    return {"P": (M, r1), "U": (d, r2), "V": (d, r3), "C": (r1, r2, r3)}


def param_count(fmt, M, d, ranks):
    """Exact number of trainable factor entries.

    With equal ranks ``r``: MB ``2Mdr``, TT ``2dr + Mr^2``, TK ``2dr + Mr + r^3``.
    """
    return sum(math.prod(s) for s in factor_shapes(fmt, M, d, ranks).values())


@dataclass
class FactorSet:
    fmt: str
    M: int
    d: int
    ranks: tuple
    scale: float
    factors: dict = field(default_factory=dict)
    init_scheme: int = INIT_UNIFORM_INV_SQRT_RANK

    def parameters(self):
        return [self.factors[name] for name in FACTOR_NAMES[self.fmt]]

    def named_parameters(self):
        return [(name, self.factors[name]) for name in FACTOR_NAMES[self.fmt]]

    def trainable_count(self):
        return sum(p.data.size for p in self.parameters())

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def copy(self):
        return FactorSet(
            self.fmt, self.M, self.d, self.ranks, self.scale,
            {k: AutoTensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.factors.items()},
            self.init_scheme,
        )

    def astype(self, dtype):
        """Copy with factors cast to ``dtype`` (used by float64 gradient checks)."""
        out = self.copy()
        for k, v in out.factors.items():
            out.factors[k] = AutoTensor(v.data.astype(dtype), requires_grad=v.requires_grad)
        return out


def init_factors(fmt, M, d, ranks, scale=1.0, seed=0):
    """Fresh factor set with ``V = 0`` and the rest uniform in ``[-1/sqrt(r), 1/sqrt(r)]``.

    ``r`` is the rank a factor is contracted over when applied to an input:
    ``U`` (MB/TT) and ``Sigma``/``P`` use ``r1``, Tucker ``U`` and ``C`` use ``r2``.
    """
    ranks = normalize_ranks(fmt, ranks)
    if M < 1 or d < 1:
        raise ConfigError(f"M and d must be positive, got M={M}, d={d}")
    for r in ranks[: {"mb": 1, "tt": 2, "tk": 3}[fmt]]:
        if not 1 <= r < d:
            raise ConfigError(f"rank {r} must satisfy 1 <= r < d={d}")
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    r1, r2, _ = ranks
    bound_rank = {"mb": {"U": r1}, "tt": {"U": r1, "Sigma": r1},
                  "tk": {"P": r1, "U": r2, "C": r2}}[fmt]
    rng = np.random.default_rng(seed)
    factors = {}
    for name, shape in factor_shapes(fmt, M, d, ranks).items():
        if name == "V":
            data = np.zeros(shape, dtype=np.float32)
        else:
            bound = 1.0 / math.sqrt(bound_rank[name])
            data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        factors[name] = AutoTensor(data, requires_grad=True)
    return FactorSet(fmt, M, d, ranks, float(scale), factors)


def expand(f):
    """Materialize the full ``M x d x d`` increment (differentiable)."""
    F = f.factors
    if f.fmt == "mb":
        out = T.matmul(F["U"], F["V"])
    elif f.fmt == "tt":
        out = T.mode_product(T.mode_product(F["Sigma"], F["U"], 2), F["V"], 3)
    else:
        core = T.mode_product(F["C"], F["P"], 1)
        out = T.mode_product(T.mode_product(core, F["U"], 2), F["V"], 3)
    return T.scale(out, f.scale)


def slice_core(f, index):
    """The ``r x r`` core coupling ``X @ U`` to ``V^T`` for one slice (TT/TK)."""
    F = f.factors
    if f.fmt == "tt":
        return T.select(F["Sigma"], index)
    r1, r2, r3 = f.ranks
    p_row = T.reshape(T.select(F["P"], index), (1, r1))
    mixed = T.matmul(p_row, T.reshape(F["C"], (r1, r2 * r3)))
    return T.reshape(mixed, (r2, r3))


def contract_forward(f, index, x, transpose=False):
    """``s * x @ dW[index]`` (or ``@ dW[index].T``) without building ``dW``.

    ``x`` is ``N x d``. Contraction runs left to right from ``x`` so the
    intermediates are ``N x r``.
    """
    if not 0 <= index < f.M:
        raise IndexError(f"slice index {index} out of range [0, {f.M})")
    F = f.factors
    if f.fmt == "mb":
        u, v = T.select(F["U"], index), T.select(F["V"], index)
        if transpose:
            out = T.matmul(T.matmul(x, T.transpose(v)), T.transpose(u))
        else:
            out = T.matmul(T.matmul(x, u), v)
    else:
        core = slice_core(f, index)
        u, v = F["U"], F["V"]
        if transpose:
            out = T.matmul(T.matmul(T.matmul(x, v), T.transpose(core)), T.transpose(u))
        else:
            out = T.matmul(T.matmul(T.matmul(x, u), core), T.transpose(v))
    return T.scale(out, f.scale)


def merge_into(f, weights):
    """Return ``weights[i] + dW[i]`` for every slice; ``f`` is untouched."""
    if len(weights) != f.M:
        raise ConfigError(f"merge_into: got {len(weights)} matrices for {f.M} slices")
    with T.no_grad():
        delta = expand(f).data
    out = []
    for i, w in enumerate(weights):
        w = np.asarray(w)
        if w.shape != (f.d, f.d):
            raise ConfigError(f"merge_into: slice {i} has shape {w.shape}, expected {(f.d, f.d)}")
        out.append((w + delta[i]).astype(w.dtype))
    return out


def unmerge(f, weights):
    """Inverse of :func:`merge_into`."""
    with T.no_grad():
        delta = expand(f).data
    return [(np.asarray(w) - delta[i]).astype(np.asarray(w).dtype) for i, w in enumerate(weights)]
