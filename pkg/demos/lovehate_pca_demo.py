"""Inject a love/hate attack into ML-100K, then detect it with PCA-VarSelect.

Usage: python3 demos/lovehate_pca_demo.py [path/to/ml-100k.inter]
"""

import sys
from pathlib import Path

from shillrec.attack import AttackParams, gen_lovehate_attack, inject, select_targets
from shillrec.dataset import SplitSpec, compute_stats, load_explicit, split_holdout
from shillrec.defense import pca_varselect

DEFAULT = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "ml-100k.inter"


def main(path):
    data = load_explicit(path)
    train, _ = split_holdout(data, SplitSpec(seed=0))
    stats = compute_stats(train)
    targets = select_targets(train, stats, 1, mode="random", seed=0)
    params = AttackParams(attack_size=50, filler_size=60, target_items=tuple(targets), seed=0)
    attacked = inject(train, gen_lovehate_attack(train, params))
    report = pca_varselect(attacked, flag_count=50)
    conf = report.confusion(attacked.is_fake)
    print(f"target item index: {targets[0]}")
    print(f"users: {train.n_users} genuine + {params.attack_size} fake")
    print(f"recall {report.recall(attacked.is_fake):.3f}  confusion {conf}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else DEFAULT)
