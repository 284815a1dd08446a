"""Model-randomisation sanity checks."""
from __future__ import annotations

import torch

from ..data import ImageDataset
from ..errors import DomainError
from ..feature_tap import TargetModel, train_toy_targets
from ..toy_models import reinitialize

MODES = ("weights", "labels")


def sanity_randomize(model: TargetModel, mode: str, seed: int = 0, train: ImageDataset | None = None,
                     val: ImageDataset | None = None, epochs: int | None = None, **train_kwargs) -> TargetModel:
    """Randomised copy of ``model``; the original is never touched.

    ``weights`` re-draws every parameter from its initial distribution.
    ``labels`` retrains the same architecture from scratch on ``train`` with
    the label vector shuffled by a seeded permutation.
    """
    if mode == "weights":
        clone = model.clone()
        torch.manual_seed(seed)
        reinitialize(clone.net)
        clone.freeze()
        clone.train_info = {"randomized": "weights", "seed": seed}
        return clone
    if mode == "labels":
        if train is None:
            raise DomainError("label randomisation needs the training set")
        perm = torch.randperm(len(train), generator=torch.Generator().manual_seed(seed))
        shuffled = train.with_labels(train.labels[perm])
        info = model.train_info
        out = train_toy_targets(
            shuffled,
            val,
            arch=model.architecture,
            epochs=epochs if epochs is not None else info.get("epochs", 3),
            seed=seed,
            lr=train_kwargs.pop("lr", info.get("lr", 1e-3)),
            batch_size=train_kwargs.pop("batch_size", info.get("batch_size", 32)),
            tap_layer=model.tap_layer,
            **{**model.net.hparams(), **train_kwargs},
        )
        out.train_info["randomized"] = "labels"
        return out
    raise DomainError(f"mode must be one of {MODES}, got {mode!r}")
