"""A tour of the tensor engine: graphs, gradients, and gradient checking.

Run with:  python3 demos/01_autodiff.py
"""

import numpy as np

from pivotalign import tensor as T
from pivotalign.tensor import Tensor, finite_diff_check, no_grad


def main():
    print("== building a small computation graph")
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)

    y = (x @ w + b).relu()
    loss = (y * y).mean()
    print(f"loss = {loss.item():.6f}")

    loss.backward()
    print(f"dL/dw row 0: {w.grad[0]}")
    print(f"dL/db:       {b.grad}")

    print("\n== gradients accumulate until zeroed")
    w_grad_once = w.grad.copy()
    loss2 = (x @ w + b).sum()
    loss2.backward()
    print(f"after second backward, grad changed: "
          f"{not np.array_equal(w.grad, w_grad_once)}")

    print("\n== no_grad blocks graph building")
    with no_grad():
        silent = (x @ w + b).sum()
    print(f"result still computes: {silent.item():.6f}; "
          f"graph-free: {silent._parents == ()}")

    print("\n== finite-difference check on a softmax cross-entropy")
    targets = np.array([1, 3, 0, 6, 2])

    def f(logits):
        lp = T.log_softmax(logits, axis=-1)
        return -(lp * Tensor(np.eye(7)[targets])).sum() / 5.0

    logits = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    err = finite_diff_check(f, logits, seed=1)
    print(f"max relative error: {err:.2e} (tolerance 1e-4)")
    assert err <= 1e-4


if __name__ == "__main__":
    main()
