"""Shared test utilities: finite differences and a small dataset."""

import numpy as np

from guidedseg.episodes import generate_synthetic_dataset

STEP = 1e-3


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f, x: np.ndarray, step=STEP, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def check_op(op, inputs, seed=0, tol=1e-6):
    """Compare the backward pass of ``op(*tensors)`` with central differences.

    The op output is contracted with a fixed random array so every output
    entry contributes.
    """
    from guidedseg import numerics as nx

    tensors = [nx.Tensor(x, requires_grad=True) for x in inputs]
    out = op(*tensors)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    nx.sum(nx.mul(out, weights)).backward()

    for t in tensors:
        def f():
            with nx.no_grad():
                return float(np.sum(op(*[nx.Tensor(u.data) for u in tensors]).data * weights))
        num = numeric_grad(f, t.data)
        assert np.max(rel_error(t.grad, num, floor=1e-6)) < tol


_DATASETS = {}


def small_dataset(classes=6, samples=12, size=32, seed=0):
    key = (classes, samples, size, seed)
    if key not in _DATASETS:
        _DATASETS[key] = generate_synthetic_dataset(classes, samples, size, seed)
    return _DATASETS[key]


def episode_gradcheck(model, episode, variant, rng, n_top=2, n_random=2, step=STEP):
    """Analytic vs central-difference gradients of the episode loss.

    For every parameter tensor: one random unit direction spanning all its
    entries, its ``n_top`` largest-gradient coordinates and ``n_random``
    random coordinates.  Differences are taken on the smooth piece of the
    loss that contains the current parameters (branch decisions replayed
    from the analytic pass); the plain difference is reported alongside.
    Returns rows ``(name, probe, analytic, numeric, plain_numeric, crossed)``
    where ``crossed`` says whether the +-step interval left that piece.
    """
    from guidedseg import numerics as nx
    from guidedseg.training import episode_loss

    for p in model.params.values():
        p.grad = None
    with nx.gate_trace() as trace:
        episode_loss(model, episode, variant).total.backward()
    grads = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
             for name, p in model.params.items()}

    def on_piece():
        with nx.no_grad(), nx.gate_trace(trace):
            return episode_loss(model, episode, variant).total.item()

    def plain():
        with nx.no_grad(), nx.gate_trace() as seen:
            value = episode_loss(model, episode, variant).total.item()
        same = len(seen) == len(trace) and all(np.array_equal(a, b) for a, b in zip(seen, trace))
        return value, same

    def probe(flat, base, delta):
        flat[:] = base + delta
        up, plain_up, same_up = on_piece(), *plain()
        flat[:] = base - delta
        down, plain_down, same_down = on_piece(), *plain()
        flat[:] = base
        return (up - down) / (2 * step), (plain_up - plain_down) / (2 * step), not (same_up and same_down)

    rows = []
    for name, p in model.params.items():
        flat, g = p.data.reshape(-1), grads[name].reshape(-1)
        base = flat.copy()
        direction = rng.normal(size=flat.size)
        direction /= np.linalg.norm(direction)
        rows.append((name, "direction", float(g @ direction), *probe(flat, base, step * direction)))
        top = np.argsort(-np.abs(g), kind="stable")[:n_top]
        picks = list(top) + list(rng.choice(flat.size, size=min(n_random, flat.size), replace=False))
        for i in picks:
            unit = np.zeros(flat.size)
            unit[int(i)] = step
            rows.append((name, f"[{int(i)}]", float(g[i]), *probe(flat, base, unit)))
    return rows


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def report_criterion(number, ok, detail):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok
