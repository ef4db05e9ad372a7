# %% [markdown]
# # Training the toy network
#
# The toy configuration runs the full architecture at 64 x 64 with one
# eighth of the channels, on synthetic scenes of bright rectangles.

# %%
import numpy as np

from lba_sodkit import metrics, network
from lba_sodkit.synthetic import rectangle_scenes

images, masks = rectangle_scenes(4, 64, seed=0)
print(images.shape, masks.shape, "foreground fraction", masks.mean().round(3))

# %% [markdown]
# The four ablations differ only in which branches exist.

# %%
for name in ("baseline", "efaba", "gdal", "full"):
    P = network.init_params(network.toy_config(name))
    print(f"{name:<9} {P.num_parameters():>8} parameters")

# %% [markdown]
# A short run with the default Adam settings. The loss sums binary
# cross-entropy over the four side outputs and the edge map.

# %%
config = network.toy_config("full")
P, losses = network.train(images, masks, config, steps=30)
print("loss", round(losses[0], 3), "->", round(losses[-1], 3))

# %%
pred = network.predict(images, config, P)
print("training MAE", round(metrics.mae(pred, masks), 4))
print("prediction range", pred.min().round(3), pred.max().round(3))
