"""Ensembles of independently initialised sequence models.

Members are stored stacked on a leading axis so that one forward call
evaluates all of them.  The ensemble mean is the prediction and the
population variance across members is the epistemic uncertainty.
"""

from __future__ import annotations

import dataclasses
import json
import os
from typing import NamedTuple, Sequence

import numpy as np

from . import seqmodel
from .seqmodel import STATE_SCALE, ModelWeights

# sigma_scalar weights: the variance of each output measured in standardized units.
SIGMA_WEIGHTS = STATE_SCALE**2
MANIFEST = "manifest.json"


class EnsemblePrediction(NamedTuple):
    mu: np.ndarray
    sigma2: np.ndarray
    sigma_scalar: np.ndarray


def combine(outputs: np.ndarray, weights: np.ndarray = SIGMA_WEIGHTS) -> EnsemblePrediction:
    """Mean and population variance over the leading (member) axis."""
    outputs = np.asarray(outputs)
    mu = outputs.mean(axis=0)
    sigma2 = np.mean((outputs - mu) ** 2, axis=0)
    return EnsemblePrediction(mu, sigma2, sigma2 @ np.asarray(weights, dtype=sigma2.dtype))


@dataclasses.dataclass
class Ensemble:
    weights: ModelWeights  # stacked, leading axis = member
    seeds: tuple = ()
    sigma_weights: np.ndarray = dataclasses.field(default_factory=lambda: SIGMA_WEIGHTS.copy())

    def __post_init__(self):
        if self.weights.members is None:
            self.weights = ModelWeights.stack([self.weights])
        if self.l < 1:
            raise ValueError("an ensemble needs at least one member")

    @property
    def l(self) -> int:
        return self.weights.members

    @property
    def config(self):
        return self.weights.config

    @classmethod
    def from_weights(cls, weights: ModelWeights, seeds: Sequence[int] | None = None) -> "Ensemble":
        return cls(weights, tuple(seeds or ()))

    @classmethod
    def from_members(cls, members: Sequence[ModelWeights], seeds: Sequence[int] | None = None) -> "Ensemble":
        return cls(ModelWeights.stack(list(members)), tuple(seeds or ()))

    @classmethod
    def initialise(cls, config, seeds: Sequence[int]) -> "Ensemble":
        members = [seqmodel.init_weights(config, np.random.default_rng(s)) for s in seeds]
        return cls.from_members(members, seeds)

    def member(self, i: int) -> ModelWeights:
        return self.weights.member(i)

    def replace(self, weights: ModelWeights) -> "Ensemble":
        return Ensemble(weights, self.seeds, self.sigma_weights)

    def copy(self) -> "Ensemble":
        return self.replace(self.weights.copy())

    def predict(self, windows, aux=None) -> EnsemblePrediction:
        return combine(seqmodel.forward(self.weights, windows, aux), self.sigma_weights)

    def save(self, directory, extra: dict | None = None) -> None:
        os.makedirs(directory, exist_ok=True)
        names = []
        for i in range(self.l):
            name = f"member_{i}"
            seqmodel.save(self.member(i), os.path.join(directory, name))
            names.append(name)
        manifest = {
            "l": self.l,
            "members": names,
            "seeds": [int(s) for s in self.seeds],
            "sigma_reduction": "weighted_sum",
            "sigma_weights": [float(w) for w in self.sigma_weights],
        }
        if extra:
            manifest["extra"] = extra
        with open(os.path.join(directory, MANIFEST), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, directory) -> "Ensemble":
        with open(os.path.join(directory, MANIFEST)) as fh:
            manifest = json.load(fh)
        members = [seqmodel.load(os.path.join(directory, name)) for name in manifest["members"]]
        if len(members) != manifest["l"]:
            raise ValueError("manifest member count does not match its member list")
        return cls(ModelWeights.stack(members), tuple(manifest.get("seeds", ())),
                   np.asarray(manifest["sigma_weights"], dtype=float))


def predict(ensemble: Ensemble, windows, aux=None) -> EnsemblePrediction:
    return ensemble.predict(windows, aux)


def train_members(ensemble: Ensemble, windows, targets, steps: int, step_size: float,
                  aux=None, reduction: str = "mean") -> Ensemble:
    """Plain gradient descent applied to every member on the same data."""
    weights = ensemble.weights
    for _ in range(steps):
        _, g = seqmodel.loss_and_grad(weights, windows, targets, aux, reduction=reduction)
        weights = weights.axpy(-step_size, g)
    return ensemble.replace(weights)
