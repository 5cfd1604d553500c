"""The propagation/interaction model: all trainable tensors in one place.

Three heads share the hand-rolled features: a graph-propagation path
(w0/w1 plus a logistic readout), a retrieval embedding with a scribble-merge
reducer feeding the same readout, and an interactive per-cell head reading
feature + previous mask + scribble channels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import ParameterError
from .features import FeatureConfig

# Pipeline preset used by the benchmark and the service: finer cells than the
# default grid plus feature gains tuned for the propagation attention.
DESK_FEATURE_CONFIG = FeatureConfig(
    crop_size=96,
    stride=4,
    rgb_gain=4.0,
    grad_gain=1.0,
    coord_gain=2.0,
    norm_gain=16.0,
)


@dataclass(frozen=True)
class PropWeights:
    """GCN layer weights: maps (D+1)-dim node features to D'-dim outputs."""

    w0: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        if self.w0.shape != self.w1.shape:
            raise ParameterError("w0 and w1 shapes must match")
        if not (np.isfinite(self.w0).all() and np.isfinite(self.w1).all()):
            raise ParameterError("propagation weights must be finite")


@dataclass(frozen=True)
class EmbedWeights:
    """3x3-neighborhood projection (d, 3, 3, D) for the retrieval embedding."""

    e: np.ndarray

    def __post_init__(self):
        if self.e.ndim != 4 or self.e.shape[1:3] != (3, 3):
            raise ParameterError(f"embed weights must be (d, 3, 3, D), got {self.e.shape}")
        if not np.isfinite(self.e).all():
            raise ParameterError("embed weights must be finite")


@dataclass(frozen=True)
class Readout:
    """Per-cell logistic readout: sigmoid(w . f + b)."""

    w: np.ndarray
    b: float = 0.0


@dataclass
class SegModel:
    feature_cfg: FeatureConfig
    prop: PropWeights
    prop_readout: Readout
    embed: EmbedWeights
    reducer_w: np.ndarray  # (D', D' + 2)
    reducer_b: np.ndarray  # (D',)
    inter_w: np.ndarray  # (D + 3,)
    inter_b: float
    gate_radius: int = 10

    @property
    def dim(self) -> int:
        return self.feature_cfg.dim

    @property
    def dim_out(self) -> int:
        return self.prop.w0.shape[0]

    @property
    def dim_embed(self) -> int:
        return self.embed.e.shape[0]

    def to_tensors(self) -> dict[str, np.ndarray]:
        return {
            "prop.w0": self.prop.w0,
            "prop.w1": self.prop.w1,
            "prop_readout.w": self.prop_readout.w,
            "prop_readout.b": np.array([self.prop_readout.b]),
            "embed.e": self.embed.e,
            "reducer.w": self.reducer_w,
            "reducer.b": self.reducer_b,
            "inter.w": self.inter_w,
            "inter.b": np.array([self.inter_b]),
        }

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "SegModel":
        return replace(
            self,
            prop=PropWeights(w0=tensors["prop.w0"], w1=tensors["prop.w1"]),
            prop_readout=Readout(w=tensors["prop_readout.w"], b=float(tensors["prop_readout.b"][0])),
            embed=EmbedWeights(e=tensors["embed.e"]),
            reducer_w=tensors["reducer.w"],
            reducer_b=tensors["reducer.b"],
            inter_w=tensors["inter.w"],
            inter_b=float(tensors["inter.b"][0]),
        )


def init_model(
    feature_cfg: FeatureConfig | None = None,
    seed: int = 0,
    d_embed: int = 8,
    gate_radius: int = 10,
) -> SegModel:
    """Warm-started model: the propagation path initially passes the
    attention-aggregated mask channel through, the reducer starts as
    [identity | 0], and the interactive head starts from mask+scribble logic.
    Training refines all of them."""
    cfg = feature_cfg or FeatureConfig()
    rng = np.random.default_rng(seed)
    d = cfg.dim
    d_in = d + 1
    d_out = d + 1
    w0 = 0.01 * rng.standard_normal((d_out, d_in))
    w1 = np.eye(d_out, d_in) + 0.01 * rng.standard_normal((d_out, d_in))
    ro_w = np.zeros(d_out)
    ro_w[-1] = 4.0
    ro = Readout(w=ro_w, b=-2.0)
    e = rng.standard_normal((d_embed, 3, 3, d)) * (0.5 / np.sqrt(9 * d))
    reducer_w = np.concatenate([np.eye(d_out), np.zeros((d_out, 2))], axis=1)
    reducer_b = np.zeros(d_out)
    inter_w = np.zeros(d + 3)
    inter_w[d] = 3.0  # previous-mask channel
    inter_w[d + 1] = 6.0  # positive scribbles
    inter_w[d + 2] = -6.0  # negative scribbles
    return SegModel(
        feature_cfg=cfg,
        prop=PropWeights(w0=w0, w1=w1),
        prop_readout=ro,
        embed=EmbedWeights(e=e),
        reducer_w=reducer_w,
        reducer_b=reducer_b,
        inter_w=inter_w,
        inter_b=-1.5,
        gate_radius=gate_radius,
    )
