"""How the network's volume term J is computed, verified, and subsampled.

J(x) is the square-root determinant of D D^T, the Gram matrix of the
network's Jacobian at x.  Three exhibits:

  1. for a purely affine stack J is a constant with a closed form, and the
     tape-free path reproduces it to machine precision;
  2. the trace/determinant (AM-GM) inequality that training asserts on
     every batch holds with real slack on a nonlinear net;
  3. averaging J's log over a small random sub-batch tracks the full-batch
     mean, which is what makes the training-time estimator affordable.
"""

import numpy as np

from masslearn import network as net
from masslearn import rng as rngmod

# --- 1. affine stack vs closed form ---------------------------------------

cfg = net.MlpConfig(5, (4, 3), 2, nonlinearity="identity")
params = net.mlp_init(cfg, seed=1)
w_eff = params.weights[-1] @ params.weights[1] @ params.weights[0]
closed = 0.5 * np.linalg.slogdet(w_eff @ w_eff.T)[1]
x = np.random.default_rng(2).normal(size=(3, 5))
vals = net.log_jacobian_batch(params, x, jitter=0.0)
print("affine stack, closed form   %.15f" % closed)
print("affine stack, implementation", vals)
print("max abs deviation            %.2e" % np.abs(vals - closed).max())

# --- 2. the inequality the trainer watches ---------------------------------

cfg = net.MlpConfig(5, (8, 8), 3)
params = net.mlp_init(cfg, seed=3)
x = np.random.default_rng(4).normal(size=(256, 5))
jac = net.jacobian_batch(params, x)
slack = net.amgm_slack(jac)
print()
print("elu net, per-sample log slack of r*log(tr(M)/r) >= log det M:")
print("  min %.4f   median %.4f   max %.4f   (negative would be a bug)"
      % (slack.min(), np.median(slack), slack.max()))

# --- 3. sub-batch estimate of the mean log J --------------------------------

full = net.log_jacobian_batch(params, x)
n_sub = 16
gaps = []
for trial in range(200):
    perm = rngmod.stream(5, "volume-demo", trial).permutation(len(x))
    gaps.append(full[perm[:n_sub]].mean() - full.mean())
gaps = np.asarray(gaps)
print()
print(f"full-batch mean log J {full.mean():+.4f}; {n_sub}-sample estimates over "
      f"200 draws: bias {gaps.mean():+.5f}, sd {gaps.std():.4f}")
print("the estimator is unbiased, so training averages it across steps for free")
