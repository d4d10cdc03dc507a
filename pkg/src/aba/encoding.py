"""Observation embedding: pooled label-occupancy channels plus recent proprio.

The most recent image is expanded into one channel per registered label plus
a channel folding every unregistered id, then average-pooled onto a coarse
grid of occupancy fractions. The last H proprioception triples are appended
with positions scaled to the unit grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Observation
from .errors import ValidationError


@dataclass(frozen=True)
class EncoderConfig:
    pool_grid: int = 4
    history: int = 2
    position_scale: float = 1.0 / 32.0


@dataclass(frozen=True)
class Encoder:
    """Maps an observation history window to a fixed-length float vector."""

    label_registry: dict[int, str]
    config: EncoderConfig = EncoderConfig()
    grid_width: int = 32
    grid_height: int = 32

    def __post_init__(self) -> None:
        ids = sorted(self.label_registry)
        if ids != list(range(len(ids))):
            raise ValidationError(f"label ids must be dense from 0, got {ids}")
        g = self.config.pool_grid
        if g <= 0 or self.grid_width % g or self.grid_height % g:
            raise ValidationError(
                f"pool grid {g} must divide image dims {self.grid_width}x{self.grid_height}"
            )
        if self.config.history < 1:
            raise ValidationError("history must be at least 1")

    @property
    def n_labels(self) -> int:
        return len(self.label_registry)

    @property
    def unknown_channel(self) -> int:
        return self.n_labels

    @property
    def visual_dim(self) -> int:
        g = self.config.pool_grid
        return (self.n_labels + 1) * g * g

    @property
    def dim(self) -> int:
        return self.visual_dim + 3 * self.config.history

    def encode(self, window: Sequence[Observation]) -> np.ndarray:
        """Embed a non-empty, chronologically ordered observation window.

        Windows shorter than the configured history are padded by repeating
        the oldest observation.
        """
        if not window:
            raise ValidationError("cannot encode an empty observation window")
        img = window[-1].image
        if img.width != self.grid_width or img.height != self.grid_height:
            raise ValidationError(
                f"image {img.width}x{img.height} != encoder grid "
                f"{self.grid_width}x{self.grid_height}"
            )
        g = self.config.pool_grid
        labels = np.asarray(img.cells, dtype=np.int64).reshape(self.grid_height, self.grid_width)
        chan = np.minimum(labels, self.n_labels)
        onehot = chan[None, :, :] == np.arange(self.n_labels + 1)[:, None, None]
        pooled = onehot.reshape(
            self.n_labels + 1, g, self.grid_height // g, g, self.grid_width // g
        ).mean(axis=(2, 4))

        h = self.config.history
        padded = [window[0]] * max(0, h - len(window)) + list(window[-h:])
        s = self.position_scaled
        proprio = np.array([s(o) for o in padded], dtype=np.float64)
        return np.concatenate([pooled.ravel(), proprio.ravel()])

    def position_scaled(self, obs: Observation) -> tuple[float, float, float]:
        sc = self.config.position_scale
        p = obs.proprio
        return (p.x * sc, p.y * sc, p.gripper)

    def visual_slice(self, z: np.ndarray) -> np.ndarray:
        """The image-channel part of an embedding (drops proprioception)."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise ValidationError(f"embedding dim {z.shape[-1]} != encoder dim {self.dim}")
        return z[..., : self.visual_dim]

    def channel_block(self, z: np.ndarray, channel: int) -> np.ndarray:
        """One pooled channel of an embedding, reshaped to (g, g)."""
        g = self.config.pool_grid
        if not 0 <= channel <= self.n_labels:
            raise ValidationError(f"channel {channel} out of range")
        start = channel * g * g
        return np.asarray(z, dtype=np.float64)[start : start + g * g].reshape(g, g)
