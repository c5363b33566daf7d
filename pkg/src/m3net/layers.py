"""The M3 block: grouped spatial mixing followed by a dense mixture of experts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import kernel as K
from .kernel import Tensor

VARIANTS = ("full", "no_moe", "no_spatial", "no_grouping")


class ConfigError(ValueError):
    pass


@dataclass
class MLPParams:
    """Two-layer perceptron D -> D -> D with ReLU in between."""
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


def mlp(x, p: MLPParams) -> Tensor:
    return K.affine(K.relu(K.affine(x, p.W1, p.b1)), p.W2, p.b2)


@dataclass
class SpatialMLPParams:
    G: Optional[Tensor]   # N x g; None when the grouping path is ablated
    mlp: MLPParams


@dataclass
class MoEParams:
    gate_W: Optional[Tensor]   # D x K
    gate_b: Optional[Tensor]   # K
    experts: list

    @property
    def num_experts(self) -> int:
        return len(self.experts)


@dataclass
class M3LayerParams:
    spatial: Optional[SpatialMLPParams]
    moe: MoEParams


def grouping_matrix(G: Tensor, softmax: bool = False) -> Tensor:
    return K.softmax_rows(G) if softmax else G


def spatial_mix(H, p: SpatialMLPParams, grouping_softmax: bool = False) -> Tensor:
    """Aggregate nodes into groups, transform each group, scatter back, add residual."""
    H = K._as_tensor(H)
    G = grouping_matrix(p.G, grouping_softmax)
    if G.shape[0] != H.shape[-2]:
        raise K.ShapeError(f"grouping matrix has {G.shape[0]} rows, input has {H.shape[-2]} nodes")
    H_g = K.matmul(K.transpose(G), H)         # g x D
    H_g_hat = mlp(H_g, p.mlp)
    H_hat = K.matmul(G, H_g_hat)              # N x D
    return K.add(H, H_hat)


def ungrouped_mix(H, p: SpatialMLPParams) -> Tensor:
    """Shared MLP applied to node rows directly, plus residual."""
    H = K._as_tensor(H)
    return K.add(H, mlp(H, p.mlp))


def gate_weights(H_s, p: MoEParams) -> Tensor:
    return K.softmax_rows(K.affine(H_s, p.gate_W, p.gate_b))


def channel_moe(H_s, p: MoEParams, residual: bool = True) -> Tensor:
    """Softmax-gated sum of all expert outputs, evaluated densely."""
    H_s = K._as_tensor(H_s)
    alpha = gate_weights(H_s, p)
    mix = None
    for k, expert in enumerate(p.experts):
        term = K.mul(K.take_column(alpha, k), mlp(H_s, expert))
        mix = term if mix is None else K.add(mix, term)
    return K.add(H_s, mix) if residual else mix


def single_expert(H_s, p: MoEParams, residual: bool = True) -> Tensor:
    """The mixture with its first expert only; the gate of one logit is identically 1."""
    H_s = K._as_tensor(H_s)
    out = mlp(H_s, p.experts[0])
    return K.add(H_s, out) if residual else out


def m3_forward(H, p: M3LayerParams, variant: str = "full", moe_residual: bool = True,
               grouping_softmax: bool = False, layer_norm: bool = False) -> Tensor:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "no_spatial":
        H_s = K._as_tensor(H)
    elif variant == "no_grouping":
        H_s = ungrouped_mix(H, p.spatial)
    else:
        H_s = spatial_mix(H, p.spatial, grouping_softmax)
    if layer_norm and variant != "no_spatial":
        H_s = K.layer_norm(H_s)
    if variant == "no_moe":
        H_c = single_expert(H_s, p.moe, moe_residual)
    else:
        H_c = channel_moe(H_s, p.moe, moe_residual)
    if layer_norm:
        H_c = K.layer_norm(H_c)
    return H_c
