from __future__ import annotations

import math
from dataclasses import dataclass

import torch


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_coords: int
    worst: tuple | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(f, params, h: float = 1e-4, stencil: int = 2, floor: float = 1e-8) -> GradCheckReport:
    """Compare autograd against central finite differences, coordinate by coordinate.

    ``f`` is a zero-argument callable returning a scalar tensor and
    ``params`` the leaf tensors to probe; both should be float64.
    ``stencil=4`` uses the fourth-order central formula.
    rel = |a - n| / max(floor, |a| + |n|); the floor keeps float64
    round-off on exactly-zero gradients from reading as relative error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    max_rel = max_abs = 0.0
    worst = None
    n = 0
    with torch.no_grad():
        for pi, (p, g) in enumerate(zip(params, grads)):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def at(delta):
                    flat[i] = orig + delta
                    return f().item()

                if stencil == 4:
                    num = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
                else:
                    num = (at(h) - at(-h)) / (2 * h)
                flat[i] = orig
                if not math.isfinite(num):
                    raise NonFiniteLoss(f"non-finite difference at param {pi}[{i}]")
                ana = gflat[i].item()
                abs_err = abs(ana - num)
                rel = abs_err / max(floor, abs(ana) + abs(num))
                if rel > max_rel:
                    max_rel, worst = rel, (pi, i, ana, num)
                max_abs = max(max_abs, abs_err)
                n += 1
    return GradCheckReport(max_rel, max_abs, n, worst)
