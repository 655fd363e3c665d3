"""Central finite-difference verification of analytic gradients.

The checker perturbs raw parameter entries and compares the resulting slope
of a scalar-valued function against the gradient produced by the reverse
pass.  It knows nothing about how the reverse pass works, which is the
point: it is the independent oracle used by the test suite and by the
``check-grad`` CLI command.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward


def numeric_grad(
    f: Callable[[], float], x: np.ndarray, eps: float = 1e-4, indices=None
) -> np.ndarray:
    """Central differences of `f` w.r.t. entries of `x` (mutated in place)."""
    flat = x.reshape(-1)
    indices = list(range(flat.size)) if indices is None else list(indices)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[j] = (fp - fm) / (2.0 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise error, scaled by the numeric gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(1e-6, float(np.max(np.abs(numeric)))) if numeric.size else 1e-6
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of ``build(inputs)`` against FD.

    `build` must construct a scalar loss from the given input tensors.
    Returns the worst relative error over all checked entries.  When
    `max_entries` is set, a random subset of entries per input is checked
    (used to keep the end-to-end suites fast).
    """
    for t in inputs:
        t.zero_grad()
    with Tape():
        loss = build(inputs)
        backward(loss, wrt=list(inputs))
    analytic = [np.array(t.grad, copy=True) for t in inputs]

    def feval() -> float:
        with Tape():
            return float(build(inputs).data)

    worst = 0.0
    for t, ag in zip(inputs, analytic):
        n = t.data.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=max_entries, replace=False)
            idx = [int(i) for i in np.sort(idx)]
        else:
            idx = list(range(n))
        num = numeric_grad(feval, t.data, eps=eps, indices=idx)
        worst = max(worst, relative_error(ag.reshape(-1)[idx], num))
    for t in inputs:
        t.zero_grad()
    return worst
