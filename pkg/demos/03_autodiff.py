"""The numpy autodiff core behind every critic and loss.

Operations record themselves on a tape. ``backward`` walks it in reverse to
produce gradients. Here we train a small MLP to fit a sine curve, then compare
its backprop gradient with central finite differences.

Run with ``python demos/03_autodiff.py``.
"""

import numpy as np

from contrastive_mi import diffcore as dc

rng = np.random.default_rng(0)
x = rng.uniform(-3, 3, size=(128, 1))
y = np.sin(x)

params = dc.build_mlp([1, 32, 32, 1], activation="relu", seed=0)


def loss_fn(p):
    tape = dc.Tape()
    out = dc.mlp_apply(p.attach(tape), x)
    return ((out - y) ** 2).mean()


adam = dc.AdamState(learning_rate=1e-2)
for step in range(1, 1501):
    loss = loss_fn(params)
    grads = dc.backward(loss.tape, loss)
    params, adam = dc.optimizer_step(adam, params, grads)
    if step in (1, 100, 500, 1500):
        print(f"step {step:>4}: mse {loss.item():.2e}")

err = dc.finite_diff_check(loss_fn, params)
print(f"\nmax relative error, backprop vs finite differences: {err:.2e}")
