"""Model bundle gluing an encoder to the prototype head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import (
    EncoderConfig,
    ParamSet,
    encode_convnet,
    encode_frozen,
    init_params,
    read_checkpoint,
    write_checkpoint,
)
from .errors import ShapeError
from .head import DISTANCES, EpisodeScores, classify_batch, compute_prototypes, episode_loss


@dataclass
class FewShotModel:
    config: EncoderConfig
    params: ParamSet
    distance: str = "squared"
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise ShapeError(f"unknown distance '{self.distance}', expected one of {DISTANCES}")
        if not self.name:
            self.name = self.config.archetype

    @classmethod
    def create(cls, config: EncoderConfig, seed: int, distance: str = "squared", name: str = ""):
        return cls(config=config, params=init_params(config, seed), distance=distance,
                   name=name, seed=seed)

    def embed(self, x, capture: dict | None = None) -> T.Tensor:
        """Embed a sample batch; arrays are wrapped into graph inputs."""
        t = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float32))
        if self.config.archetype == "conv-net":
            return encode_convnet(t, self.params, self.config, capture=capture)
        if t.ndim > 2:
            t = T.reshape(t, (t.shape[0], -1))  # flat features stand in for a frozen backbone
        return encode_frozen(t, self.params, self.config)

    def episode_scores(self, episode) -> tuple[T.Tensor, EpisodeScores]:
        """Forward one episode; returns (loss, scores) with the graph attached."""
        support = self.embed(episode.support_x)
        protos = compute_prototypes(support, episode.support_y, episode.way)
        queries = self.embed(episode.query_x)
        scores = classify_batch(queries, protos, self.distance)
        return episode_loss(scores, episode.query_y), scores

    def save(self, path) -> None:
        write_checkpoint(path, self.config, self.seed, self.params)

    @classmethod
    def load(cls, path, distance: str = "squared", name: str = "") -> "FewShotModel":
        config, seed, params = read_checkpoint(path)
        return cls(config=config, params=params, distance=distance, name=name, seed=seed)
