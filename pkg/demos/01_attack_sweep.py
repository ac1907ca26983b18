"""
How fast does accuracy collapse as the attack budget grows?

Trains the reference network on a small synthetic lesion set, then sweeps
FGSM, BIM and PGD over a handful of budgets and prints a table of post-attack
accuracy. Budgets are in 1/255 units of the original pixel scale.

    python3 demos/01_attack_sweep.py
"""

import time

from medadv.attacks import AttackConfig, attack_batch
from medadv.classifier import TrainConfig, build_model, evaluate, reference_recipe, train
from medadv.data import SynthConfig, generate_synthetic, split_dataset

BUDGETS = (0.5, 1, 2, 4, 8)

data = generate_synthetic(SynthConfig(num_classes=2, seed=7), 1200)
tr, _, test = split_dataset(data, (0.7, 0.0, 0.3), seed=7)

t0 = time.perf_counter()
model = train(build_model(reference_recipe(2, seed=7)), tr.images, tr.labels,
              TrainConfig(epochs=10, learning_rate=0.02, batch_size=16, seed=7))
acc, auc = evaluate(model, test.images, test.labels)
print(f"trained in {time.perf_counter() - t0:.0f}s; clean accuracy {acc:.3f}, AUC {auc:.3f}")

x, y = test.images[:200], test.labels[:200]
print("\neps/255 " + "".join(f"{m:>8}" for m in ("fgsm", "bim", "pgd")))
for eps in BUDGETS:
    row = [attack_batch(model, x, y, AttackConfig(m, eps, seed=1)).accuracy() for m in ("fgsm", "bim", "pgd")]
    print(f"{eps:>7g} " + "".join(f"{a:>8.3f}" for a in row))

# Eight grey levels out of 255, invisible to the eye, is enough for the
# iterative attacks to flip every prediction; FGSM lags behind them.
