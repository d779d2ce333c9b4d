#!/usr/bin/env python3
"""Reproduce cross-modal alignment breakdown with frozen encoders.

Visual features of held-out concepts are perfectly discriminative (the
nearest-prototype ceiling is ~100%), yet zero-shot classification of those
same images sits at chance because their names all map to one blind token.
Seen concepts stay near-perfect: the breakdown is purely a text-side failure.
"""

from namelearn.world import WorldConfig, build_world

world = build_world(WorldConfig())

seen_x, seen_y = world.sample_split(world.seen_ids, per_class=200, seed=1)
ood_x, ood_y = world.sample_split(world.ood_ids, per_class=200, seed=2)

seen_acc = world.zero_shot_accuracy(seen_x, seen_y, world.seen_ids)
ood_acc = world.zero_shot_accuracy(ood_x, ood_y, world.ood_ids)
ceiling = world.bayes_oracle_accuracy(ood_x, ood_y, world.ood_ids)
chance = 1.0 / len(world.ood_ids)

print(f"seen zero-shot accuracy      : {seen_acc:.4f}")
print(f"held-out zero-shot accuracy  : {ood_acc:.4f}   (chance = {chance:.2f})")
print(f"held-out visual ceiling      : {ceiling:.4f}   (nearest prototype)")
print()
print("The gap between the ceiling and chance is the measurable room that")
print("name learning can recover; see 03_few_shot_adaptation.py.")

# Per-image probabilities confirm the collapse: with one shared blind token
# every held-out class gets exactly the same score.
probs = world.zero_shot_probs(ood_x[:1], world.ood_ids)
print("\nfirst held-out image, class probabilities:", probs[0].round(4))
