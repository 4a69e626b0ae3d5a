"""Positionally encoded MLP fields for volume density and color.

World points are mapped into the unit cube by a padded scene bounding
box, expanded with sin/cos features over octave frequencies, and pushed
through a small ReLU MLP.  Density uses a softplus output head, color a
sigmoid head.  Forward passes accept an optional flat parameter list so
the same code path serves training, checkpoint restore, and gradient
checks against float64 copies of the weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class SceneBox:
    """Axis-aligned world region mapped onto [-1, 1]^3 for field input."""

    center: np.ndarray
    half_extent: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        half = np.asarray(self.half_extent, dtype=np.float64).reshape(3)
        object.__setattr__(self, "half_extent", np.maximum(half, 1e-6))

    @staticmethod
    def from_points(points: np.ndarray, padding: float = 0.1) -> "SceneBox":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if points.size == 0:
            raise ValueError("cannot build a scene box from zero points")
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        center = (lo + hi) / 2.0
        half = (hi - lo) / 2.0 * (1.0 + padding)
        return SceneBox(center, half)

    def diagonal(self) -> float:
        return float(2.0 * np.linalg.norm(self.half_extent))

    def normalize(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) / self.half_extent

    def normalize_graph(self, points: Tensor) -> Tensor:
        dt = points.dtype
        scaled = (points - self.center.astype(dt)) * (1.0 / self.half_extent).astype(dt)
        return ad.clip(scaled, -1.0, 1.0)


def encoding_dim(num_frequencies: int) -> int:
    return 3 * (1 + 2 * num_frequencies)


def encode(points: Tensor, num_frequencies: int) -> Tensor:
    """Per-coordinate features [x, sin(2^l pi x), cos(2^l pi x)] for l < L."""
    return ad.positional_encode(points, num_frequencies)


@dataclass(frozen=True)
class FieldConfig:
    """MLP shape plus a constant pre-activation shift on the output.

    A negative ``output_bias`` on the density head starts the field
    near-transparent, so unsupervised space (behind surfaces) does not
    absorb leaked transmittance and skew expected depth.
    """
    num_frequencies: int
    hidden_units: int = 128
    hidden_layers: int = 4
    seed: int = 0
    output_bias: float = 0.0

    def to_dict(self) -> dict:
        return {
            "num_frequencies": self.num_frequencies,
            "hidden_units": self.hidden_units,
            "hidden_layers": self.hidden_layers,
            "seed": self.seed,
            "output_bias": self.output_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "FieldConfig":
        return FieldConfig(**d)


class Mlp:
    """Fully connected ReLU network with uniform fan-in initialization."""

    def __init__(self, in_dim: int, out_dim: int, hidden_units: int,
                 hidden_layers: int, seed: int, dtype=np.float32):
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden_units] * hidden_layers + [out_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for a, b in zip(dims[:-1], dims[1:]):
            bound = 1.0 / math.sqrt(a)
            self.weights.append(Tensor(rng.uniform(-bound, bound, (a, b)).astype(dtype),
                                       requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, b).astype(dtype),
                                      requires_grad=True))

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_trainable(self, flag: bool) -> bool:
        """Toggle gradient tracking; returns the previous setting."""
        previous = self.weights[0].requires_grad
        for p in self.parameters():
            p.requires_grad = flag
        return previous

    def _layers(self, params: Sequence[Tensor] | None) -> tuple[Sequence[Tensor], Sequence[Tensor]]:
        if params is None:
            return self.weights, self.biases
        if len(params) != 2 * len(self.weights):
            raise ValueError("parameter override has wrong length")
        return params[0::2], params[1::2]

    def forward(self, x: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        weights, biases = self._layers(params)
        h = ad.astype(x, weights[0].dtype)
        for w, b in zip(weights[:-1], biases[:-1]):
            h = ad.relu(ad.linear(h, w, b))
        return ad.linear(h, weights[-1], biases[-1])


class _Field:
    activation = staticmethod(lambda t: t)
    out_dim = 1

    def __init__(self, scene_box: SceneBox, config: FieldConfig, dtype=np.float32):
        self.scene_box = scene_box
        self.config = config
        self.mlp = Mlp(encoding_dim(config.num_frequencies), self.out_dim,
                       config.hidden_units, config.hidden_layers, config.seed, dtype=dtype)

    def parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    def set_trainable(self, flag: bool) -> bool:
        return self.mlp.set_trainable(flag)

    def load_parameter_values(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(params, arrays):
            if p.values.shape != a.shape:
                raise ValueError(f"parameter shape mismatch: {p.values.shape} vs {a.shape}")
            p.values = a.astype(p.values.dtype, copy=True)

    def _features(self, points: Tensor | np.ndarray, dtype) -> Tensor:
        pts = ad.as_tensor(points)
        normalized = self.scene_box.normalize_graph(pts)
        return encode(ad.astype(normalized, dtype), self.config.num_frequencies)

    def query(self, points: Tensor | np.ndarray, params: Sequence[Tensor] | None = None) -> Tensor:
        """Field values at world points of shape (n, 3)."""
        weights = self.mlp.weights if params is None else params[0::2]
        feats = self._features(points, weights[0].dtype)
        raw = self.mlp.forward(feats, params=params)
        if self.config.output_bias != 0.0:
            raw = raw + self.config.output_bias
        return self.activation(raw)


class DensityField(_Field):
    """Non-negative volume density; softplus keeps the output smooth."""

    activation = staticmethod(ad.softplus)
    out_dim = 1

    def query(self, points, params=None) -> Tensor:
        out = super().query(points, params=params)
        return ad.reshape(out, (out.shape[0],))


class ColorField(_Field):
    """RGB in [0, 1] via a sigmoid head."""

    activation = staticmethod(ad.sigmoid)
    out_dim = 3
