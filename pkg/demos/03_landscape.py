"""
Why is the model so fragile? Look at the loss surface around one image.

Builds the 2-D loss grid spanned by the model's own gradient sign and the
gradient sign of an independently trained surrogate, prints it as a small
table, and renders the saliency and Grad-CAM maps as ASCII shading.

    python3 demos/03_landscape.py
"""

import numpy as np

from medadv.analysis import grad_cam, loss_direction, loss_landscape, saliency_map, surrogate_direction
from medadv.classifier import TrainConfig, build_model, reference_recipe, train
from medadv.data import SynthConfig, generate_synthetic, split_dataset

data = generate_synthetic(SynthConfig(num_classes=2, seed=5), 1000)
tr, _, test = split_dataset(data, (0.8, 0.0, 0.2), seed=5)


def fit(seed):
    return train(build_model(reference_recipe(2, seed=seed)), tr.images, tr.labels,
                 TrainConfig(epochs=10, learning_rate=0.02, batch_size=16, seed=seed))


model, surrogate = fit(5), fit(6)
x, y = test.images[0], int(test.labels[0])

axis = np.arange(0, 17, 4)
grid = loss_landscape(model, x, y, loss_direction(model, x, y), surrogate_direction(surrogate, x, y), axis, axis)
print("loss over eps1 (rows, own gradient) x eps2 (columns, surrogate gradient), 1/255 units")
print("      " + "".join(f"{e:>9g}" for e in axis))
for e1, row in zip(axis, grid.loss):
    print(f"{e1:>5g} " + "".join(f"{v:>9.1e}" for v in row))
print(f"sharpness (max - clean loss): {grid.sharpness:.3e}")
# The loss climbs by orders of magnitude within a few grey levels, then falls
# again once the fixed sign direction overshoots the ridge. Iterative attacks
# recompute the direction at every step, which is why they beat FGSM.

SHADES = " .:-=+*#%@"


def show(title, m):
    print(f"\n{title}")
    for r in m[::2]:
        print("".join(SHADES[min(int(v * len(SHADES)), len(SHADES) - 1)] for v in r[::1]))


show("saliency |dL/dx|", saliency_map(model, x, y).values)
show("Grad-CAM, predicted class", grad_cam(model, x, y).values)
