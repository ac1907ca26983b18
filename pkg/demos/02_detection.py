"""
Adversarial examples are easy to spot from the inside.

Attacks a trained model with PGD, then fits logistic detectors on four
feature families (kernel density, LID, raw deep features, binarized deep
features) using the AdvTrain half and reports ROC AUC on AdvTest. A second
block checks how a detector fitted on FGSM fares on the other attacks.

    python3 demos/02_detection.py
"""

from medadv.attacks import AttackConfig, attack_batch
from medadv.classifier import TrainConfig, build_model, evaluate, reference_recipe, train
from medadv.data import SynthConfig, generate_synthetic, split_dataset
from medadv.detectors import detect_experiment, transfer_experiment
from medadv.features import KdConfig, LidConfig, fit_kd_reference

EPS = 3.0

data = generate_synthetic(SynthConfig(num_classes=2, seed=3), 1400)
tr, adv_train, adv_test = split_dataset(data, (0.5, 0.35, 0.15), seed=3)
model = train(build_model(reference_recipe(2, seed=3)), tr.images, tr.labels,
              TrainConfig(epochs=10, learning_rate=0.02, batch_size=16, seed=3))
print("clean accuracy %.3f" % evaluate(model, adv_test.images, adv_test.labels)[0])

pairs = {}
for method in ("fgsm", "pgd", "cw"):
    cfg = AttackConfig(method, EPS, seed=11)
    pairs[method] = (attack_batch(model, adv_train.images, adv_train.labels, cfg),
                     attack_batch(model, adv_test.images, adv_test.labels, cfg))
    print(f"{method}: success rate on AdvTest {pairs[method][1].success_rate():.3f}")

kd = fit_kd_reference(model, tr.images, tr.labels, KdConfig())
lid = LidConfig(n=20, batch_size=100)

print("\nAUC against PGD")
for family in ("KD", "LID", "DFeat", "QFeat"):
    row = detect_experiment(model, *pairs["pgd"], family, kd=kd, lid=lid)
    print(f"  {family:6s} {row.auc:.4f}   (fit {row.fit_normal}+{row.fit_adversarial}, "
          f"eval {row.eval_normal}+{row.eval_adversarial})")

print("\nDFeat detector fitted on FGSM, scored on the others")
for row in transfer_experiment(model, pairs["fgsm"], pairs, "DFeat"):
    print(f"  -> {row.target:4s} {row.protocol:9s} {row.auc:.4f}")
