"""
Checking operator gradients against finite differences
=======================================================

Every layer in the network carries its own backward closure.  This script
runs the central-difference checker over a few of them and then breaks a
gradient on purpose to show the checker noticing.
"""

import numpy as np

from simembed import ops

rng = np.random.default_rng(0)

# convolution: x (N,C,H,W), kernels (F,C,kh,kw), bias (F,)
x = rng.standard_normal((1, 2, 5, 5))
kernels = rng.standard_normal((3, 2, 3, 3))
bias = rng.standard_normal(3)
report = ops.finite_diff_check(
    lambda a, k, b: ops.conv2d(a, k, b, padding=1), [x, kernels, bias])
print(f"conv2d       max rel err {report.max_rel_error:.2e} "
      f"passed={report.passed}")

# fully connected layer
report = ops.finite_diff_check(
    ops.affine, [rng.standard_normal((4, 6)),
                 rng.standard_normal((6, 3)),
                 rng.standard_normal(3)])
print(f"affine       max rel err {report.max_rel_error:.2e} "
      f"passed={report.passed}")

# row-wise L2 normalization, the layer that keeps embeddings on the sphere
report = ops.finite_diff_check(ops.l2_normalize,
                               [rng.standard_normal((4, 8))])
print(f"l2_normalize max rel err {report.max_rel_error:.2e} "
      f"passed={report.passed}")

# relu has a kink at zero, so nudge the inputs away from it first
x = rng.standard_normal((3, 7))
x[np.abs(x) < 0.01] += 0.05
report = ops.finite_diff_check(ops.relu, [x])
print(f"relu         max rel err {report.max_rel_error:.2e} "
      f"passed={report.passed}")


# now sabotage a gradient and watch the same harness flag it
def broken_affine(a, w, b):
    good = ops.affine(a, w, b)

    def bad_grad(upstream):
        da, dw, db = good.grad(upstream)
        return da * 1.01, dw, db  # 1% error on the input gradient

    return ops.OpGrad(good.output, bad_grad)


report = ops.finite_diff_check(
    broken_affine, [rng.standard_normal((4, 6)),
                    rng.standard_normal((6, 3)),
                    rng.standard_normal(3)])
print(f"\nbroken affine max rel err {report.max_rel_error:.2e} "
      f"passed={report.passed}  <- the checker catches the 1% sabotage")
