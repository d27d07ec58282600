import numpy as np

from shiftguard import tensorcore as tc


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar f at x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def tape_grads(build, arrays):
    """Gradient of build(*traced) wrt each array via the tape."""
    tape = tc.Tape()
    ts = [tape.watch(a) for a in arrays]
    loss = build(*ts)
    tape.backward(loss)
    return [tape.grad(t) for t in ts]


def numeric_grads(build, arrays, h=1e-5):
    out = []
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [tc.Tensor(b) for b in arrays]
            args[i] = tc.Tensor(v)
            return build(*args).item()
        out.append(central_diff(f, a, h))
    return out


def path_graph(n: int):
    from shiftguard.graph import Graph

    edges = [(i, i + 1) for i in range(n - 1)]
    return Graph.from_edges(n, edges, np.zeros((n, 1)))


def random_graph(rng, n: int, p: float, d: int = 3, **kw):
    from shiftguard.graph import Graph

    iu = np.triu_indices(n, 1)
    keep = rng.random(iu[0].size) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    return Graph.from_edges(n, edges, rng.standard_normal((n, d)), **kw)
