"""High-resolution sparse encoder: preencoder plus four residual stages.

There is no max pooling: every stage downsamples exactly once, with a
kernel-1 stride-2 convolution, so the coordinates of level ``i + 1`` are the
floor-halved coordinates of level ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .modelio import PipelineConfig
from .sconv import (AffineParams, ConvParams, affine_from, affine_relu, conv_down,
                    conv_from, conv_s1)
from .voxgrid import SparseTensor


@dataclass(frozen=True)
class ResidualUnit:
    conv1: ConvParams
    norm1: AffineParams
    conv2: ConvParams
    norm2: AffineParams


@dataclass(frozen=True)
class Stage:
    down: ConvParams
    down_norm: AffineParams
    units: tuple[ResidualUnit, ...]


@dataclass(frozen=True)
class BackboneParams:
    pre: ConvParams
    pre_norm: AffineParams
    stages: tuple[Stage, Stage, Stage, Stage]

    @classmethod
    def from_dict(cls, params: dict, config: PipelineConfig) -> "BackboneParams":
        stages = []
        for s in range(1, 5):
            p = f"backbone.stage{s}"
            units = tuple(
                ResidualUnit(conv_from(params, f"{p}.unit{u}.conv1", 3),
                             affine_from(params, f"{p}.unit{u}.norm1"),
                             conv_from(params, f"{p}.unit{u}.conv2", 3),
                             affine_from(params, f"{p}.unit{u}.norm2"))
                for u in range(1, config.units[s - 1] + 1))
            stages.append(Stage(conv_from(params, f"{p}.down.conv", 1, stride=2),
                                affine_from(params, f"{p}.down.norm"), units))
        return cls(conv_from(params, "backbone.pre.conv", 1, stride=2),
                   affine_from(params, "backbone.pre.norm"), tuple(stages))


def residual_unit(x: SparseTensor, unit: ResidualUnit) -> SparseTensor:
    """``relu(x + norm2(conv2(relu(norm1(conv1(x))))))`` on unchanged coordinates."""
    h = affine_relu(conv_s1(x, unit.conv1), unit.norm1, relu=True)
    h = affine_relu(conv_s1(h, unit.conv2), unit.norm2, relu=False)
    if h.channels != x.channels:
        raise ValueError("residual unit must preserve the channel count")
    return x.with_features(_relu(x.features + h.features))


def _relu(a):
    return a.clip(min=0.0)


def backbone_forward(scene: SparseTensor, p: BackboneParams) -> list[SparseTensor]:
    """Encode a 1-channel input scene; returns ``[F1, F2, F3, F4]`` (levels 1..4)."""
    if scene.channels != p.pre.in_channels:
        raise ValueError(f"scene has {scene.channels} channels, preencoder expects "
                         f"{p.pre.in_channels}")
    x = affine_relu(conv_down(scene, p.pre), p.pre_norm)
    feats = []
    for stage in p.stages:
        x = affine_relu(conv_down(x, stage.down), stage.down_norm)
        for unit in stage.units:
            x = residual_unit(x, unit)
        feats.append(x)
    return feats
