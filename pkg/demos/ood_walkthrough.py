"""Using a trained model's density scores to flag distribution shift.

A model trained with the mixture head carries a density over its own
representation, so "how plausible is this input" is a first-class query,
not an afterthought.  Train briefly on blobs, then score three pools:
held-out in-distribution data, a shifted copy, and a same-distribution
control that should look like a coin flip.
"""

from masslearn import data as datamod
from masslearn import metrics
from masslearn import network as net
from masslearn import training as tr

train_ds, _ = datamod.gaussian_blobs(1536, 3, 2, 4.0, seed=31)
cfg = tr.TrainConfig(method="mass", beta=1e-3, mixture_components=3,
                     steps=400, batch_size=64, lr=5e-3, variational_lr=2e-2,
                     eval_interval=400, seed=11)
ckpt = tr.train(train_ds, None, net.MlpConfig(2, (16,), 2, use_batchnorm=True),
                cfg).checkpoint


def pool(seed, shift=0.0):
    ds, _ = datamod.gaussian_blobs(1000, 3, 2, 4.0, seed, shift=shift)
    return datamod.normalize_apply(ds.features, ckpt.norm)


inliers = pool(41)
shifted = pool(43, shift=10.0)
control = pool(42)

print(f"{'score':12s} {'auroc(shift)':>13s} {'apr_in':>8s} {'apr_out':>8s} "
      f"{'auroc(control)':>15s}")
for name in metrics.OOD_SCORE_NAMES:
    s_in = metrics.ood_scores(ckpt, inliers, name)
    s_out = metrics.ood_scores(ckpt, shifted, name)
    s_ctrl = metrics.ood_scores(ckpt, control, name)
    print(f"{name:12s} {metrics.auroc(s_in, s_out):13.4f} "
          f"{metrics.average_precision_ood(s_in, s_out, 'in'):8.4f} "
          f"{metrics.average_precision_ood(s_in, s_out, 'out'):8.4f} "
          f"{metrics.auroc(s_in, s_ctrl):15.4f}")

print()
print("density scores (max_q, marginal_q) separate the shifted pool cleanly;")
print("the control column staying near 0.5 is the honesty check.")
print("note the entropy score: far from the data the class posterior saturates,")
print("so shifted points look *more* confident and its auroc lands below 0.5.")
print("that failure is exactly why the density view of the model is worth having")
