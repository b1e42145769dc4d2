"""Train one desk model clean and with FastAdv, then attack both.

Prints clean and adversarial error for every attack kind, so the effect of
adversarial training and the relative attack strengths are visible at a
glance. Takes a few minutes on one core.
"""

import numpy as np

from moras.attacks import ATTACK_KINDS, AttackKind, default_attack_configs
from moras.data import Splits, generate_synthetic
from moras.genome import NetworkSpec, random_genome
from moras.network import Model
from moras.objectives import EvalSettings, attack_error, dataset_error, train_substitute
from moras.rng import stream
from moras.training import TrainConfig, train


def main():
    splits = Splits.from_dataset(generate_synthetic(seed=0))
    val = splits.val
    spec = NetworkSpec.from_genome(random_genome(np.random.default_rng(0)), val.class_count)
    substitute = train_substitute(splits.train, EvalSettings(val.class_count), seed=1)
    attacks = default_attack_configs(seed=0)

    print(f"{'attack':>10} | {'clean-trained':>13} | {'FastAdv':>8}")
    rows = {kind.label: [] for kind in ATTACK_KINDS}
    clean = []
    for mode in ("clean", "fastadv"):
        model = Model(spec, seed=0)
        train(model, splits.train, TrainConfig(epochs=20, mode=mode))
        clean.append(dataset_error(model, val))
        for kind in ATTACK_KINDS:
            sub = substitute if kind is AttackKind.BLK_FGSM else None
            rows[kind.label].append(attack_error(model, val, attacks[kind],
                                                 stream(0, int(kind)), sub))
    print(f"{'none':>10} | {clean[0]:12.1f}% | {clean[1]:7.1f}%")
    for label, (a, b) in rows.items():
        print(f"{label:>10} | {a:12.1f}% | {b:7.1f}%")


if __name__ == "__main__":
    main()
