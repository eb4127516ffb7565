"""Tour of the autodiff core: build a graph, check a gradient by hand,
minimize a quadratic with Adam, look at the two schedules."""

import numpy as np

from sedkit.diffcore import (Adam, LinearDecay, Tensor, WarmupThenConstant,
                             no_grad)

# a small graph: f(w) = mean(tanh(x @ w) ** 2)
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(5, 3)))
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

loss = (x @ w).tanh().square().mean()
loss.backward()
print(f"loss = {float(loss.data):.6f}")
print(f"grad shape {w.grad.shape}, grad[0,0] = {w.grad[0, 0]:+.6f}")

# central finite difference on one coordinate
h = 1e-6
with no_grad():
    w.data[0, 0] += h
    f_plus = float((x @ w).tanh().square().mean().data)
    w.data[0, 0] -= 2 * h
    f_minus = float((x @ w).tanh().square().mean().data)
    w.data[0, 0] += h
fd = (f_plus - f_minus) / (2 * h)
print(f"finite difference   = {fd:+.6f}")
print(f"absolute difference = {abs(fd - w.grad[0, 0]):.2e}")

# Adam walks a quadratic bowl to its minimum at 3; the learning rate is
# given per step so schedules can drive it
theta = Tensor(np.array([10.0]), requires_grad=True)
opt = Adam([theta])
for step in range(400):
    theta.zero_grad()
    ((theta - Tensor(np.array([3.0]))).square().sum()).backward()
    opt.step(0.1)
print(f"after 400 Adam steps: theta = {theta.data[0]:.6f} (target 3)")

warm = WarmupThenConstant(2e-5, total_steps=1000, warmup_fraction=0.1)
decay = LinearDecay(1e-5, 2e-6, total_steps=1000)
print("warmup lr at steps 0/50/100/500:",
      [f"{warm.lr(s):.2e}" for s in (0, 50, 100, 500)])
print("decay  lr at steps 0/500/1000:",
      [f"{decay.lr(s):.2e}" for s in (0, 500, 1000)])
