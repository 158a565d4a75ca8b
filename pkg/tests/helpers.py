"""Shared test utilities: finite differences and random smooth graphs.

The finite-difference and matrix-arithmetic oracles here deliberately avoid
the library's own evaluation paths so they stay independent checks.
"""

from __future__ import annotations

import numpy as np

from gmpslab.diffcore import Graph


def central_diff(fn, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        up = x0.copy()
        up[i] += h
        dn = x0.copy()
        dn[i] -= h
        grad[i] = (fn(up) - fn(dn)) / (2.0 * h)
    return grad


def assert_close_rel(got: np.ndarray, want: np.ndarray, rel: float, floor: float = 1e-7):
    """Per-coordinate relative comparison with an absolute floor for tiny entries."""
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    assert got.shape == want.shape
    denom = np.maximum(np.abs(want), floor)
    worst = np.max(np.abs(got - want) / denom) if got.size else 0.0
    assert worst <= rel, f"relative error {worst:.3e} exceeds {rel:.0e}"


def random_smooth_graph(rng: np.random.Generator, n_params: int | None = None):
    """Random small graph over a flat parameter vector, smooth everywhere.

    Returns (graph, params0). Ops are drawn from the smooth subset so central
    finite differences are a valid oracle at any point.
    """
    g = Graph()
    if n_params is None:
        n_params = int(rng.integers(2, 9))
    # split the parameter vector into a few vector/matrix leaves
    pool = []
    remaining = n_params
    idx = 0
    while remaining > 0:
        if remaining >= 4 and rng.random() < 0.4:
            rows = int(rng.integers(2, min(4, remaining // 2) + 1))
            cols = remaining // rows if rows * 2 > remaining else int(rng.integers(2, remaining // rows + 1))
            cols = max(1, min(cols, remaining // rows))
            h = g.param(f"p{idx}", (rows, cols))
            pool.append(h)
            remaining -= rows * cols
        else:
            width = int(rng.integers(1, remaining + 1))
            h = g.param(f"p{idx}", (width,))
            pool.append(h)
            remaining -= width
        idx += 1

    def compatible_pairs():
        pairs = []
        for a in pool:
            for b in pool:
                sa, sb = g.shape(a), g.shape(b)
                if sa == sb or sa == () or sb == ():
                    pairs.append((a, b))
        return pairs

    n_ops = int(rng.integers(3, 10))
    for _ in range(n_ops):
        kind = rng.choice(["add", "sub", "mul", "tanh", "exp", "softplus", "scale", "matvec"])
        if kind in ("add", "sub", "mul"):
            pairs = compatible_pairs()
            a, b = pairs[int(rng.integers(len(pairs)))]
            pool.append(getattr(g, kind)(a, b))
        elif kind == "tanh":
            a = pool[int(rng.integers(len(pool)))]
            pool.append(g.tanh(a))
        elif kind == "exp":
            a = pool[int(rng.integers(len(pool)))]
            # keep the argument small so exp stays well conditioned
            pool.append(g.exp(g.mul(g.const(0.3), g.tanh(a))))
        elif kind == "softplus":
            a = pool[int(rng.integers(len(pool)))]
            pool.append(g.log(g.add(g.const(1.0), g.exp(g.tanh(a)))))
        elif kind == "scale":
            a = pool[int(rng.integers(len(pool)))]
            pool.append(g.mul(g.const(float(rng.normal())), a))
        elif kind == "matvec":
            mats = [h for h in pool if len(g.shape(h)) == 2]
            if not mats:
                continue
            m = mats[int(rng.integers(len(mats)))]
            vecs = [h for h in pool if g.shape(h) == (g.shape(m)[1],)]
            if not vecs:
                continue
            v = vecs[int(rng.integers(len(vecs)))]
            pool.append(g.matmul(m, v))

    total = g.const(0.0)
    for h in pool:
        total = g.add(total, g.mean(h) if g.shape(h) != () else h)
    g.set_output(total)
    params0 = rng.normal(scale=0.7, size=g.param_size)
    return g, params0


def mlp_forward_oracle(x, weights, biases, nonlinearity=np.tanh):
    """Plain matrix-arithmetic forward pass, independent of the graph engine."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w + b
        if i < len(weights) - 1:
            h = nonlinearity(h)
    return h
