from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               floor: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` is called with no arguments and must read the current values of
    ``params``; it is re-evaluated once per perturbed coordinate, so keep the
    parameter count small.  Error per coordinate is
    ``|autodiff - fd| / max(|autodiff|, |fd|, floor)``.  The floor keeps
    coordinates whose true gradient is ~0 from being judged on float64
    roundoff in the difference quotient (about 1e-10 absolute at eps=1e-5).
    """
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = p.data.copy(order="C")
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise ValueError("f is not finite at the base point")
        tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f().item()
            flat[k] = orig - eps
            fm = f().item()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("f is not finite at a perturbed point")
            fd = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(gflat[k] - fd) / max(abs(gflat[k]), abs(fd), floor))
    for p in params:
        p.grad = None
    return worst
