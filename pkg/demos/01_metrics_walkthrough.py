# %% [markdown]
# # Scoring saliency maps
#
# A saliency map is a float image in [0, 1]; the ground truth is a binary
# mask. The toolkit reports eight numbers per pair: MAE, the structure
# score, and the max / mean / adaptive summaries of the F and E curves.

# %%
import numpy as np

from lba_sodkit import metrics

rng = np.random.default_rng(0)
gt = np.zeros((32, 32), bool)
gt[8:24, 10:22] = True

# %% [markdown]
# A perfect prediction sits at the ideal corner of every metric.

# %%
perfect = metrics.evaluate_pair(gt.astype(float), gt)
print({k: round(v, 6) for k, v in perfect.scalars().items()})

# %% [markdown]
# Blurring the mask with noise degrades every score. The curves hold one
# row per threshold ``t / 255``.

# %%
noisy = np.clip(gt + 0.35 * rng.standard_normal(gt.shape), 0, 1)
report = metrics.evaluate_pair(noisy, gt)
print({k: round(v, 4) for k, v in report.scalars().items()})
curve = report.curves.as_array()
print("rows:", curve.shape[0], "best F at threshold", curve[1:, 3].argmax() + 1, "/ 255")

# %% [markdown]
# Dataset numbers average the per-image scalars and curves. The max
# summaries are read off the averaged curve, so they can sit below the
# mean of each image's own maximum.

# %%
reports = [metrics.evaluate_pair(np.clip(gt + s * rng.standard_normal(gt.shape), 0, 1), gt)
           for s in (0.1, 0.3, 0.6)]
total = metrics.aggregate(reports)
print("f_max on mean curve:", round(total.f_max, 4),
      "mean of per-image f_max:", round(total.f_max_per_image, 4))
