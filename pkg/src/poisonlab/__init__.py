"""poisonlab: a desk-scale laboratory for clean-label targeted data poisoning.

The package is organized by pipeline stage:

- ``diffcore``: reverse-mode automatic differentiation over numpy arrays.
- ``models``: small feed-forward surrogate/victim architectures.
- ``datapipe``: synthetic multi-view data, binary record IO, augmentation.
- ``craft``: gradient-matching losses and the perturbation crafting loop.
- ``victim``: victim training, success metrics, viewpoint heatmaps.
- ``defense``: training-set preprocessing defenses.
- ``proplab``: numerical verification of the admissible-perturbation bound.
- ``config`` / ``runner`` / ``report`` / ``cli``: experiment orchestration.
"""

__version__ = "0.1.0"
