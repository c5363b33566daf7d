"""Input embedding: projected history, node identity, time of day, day of week."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .kernel import Tensor


@dataclass
class EmbeddingParams:
    W_F: Tensor   # (L*C) x D_F
    b_F: Tensor   # D_F
    E_S: Tensor   # N x D_S
    E_d: Tensor   # T_d x D_d
    E_w: Tensor   # T_w x D_w

    @property
    def width(self) -> int:
        return sum(t.shape[-1] for t in (self.W_F, self.E_S, self.E_d, self.E_w))


def embed(x, tod_idx, dow_idx, p: EmbeddingParams) -> Tensor:
    """Map history ``x`` to the per-node representation ``H``.

    Accepts a single window ``x[L, N, C]`` with integer indices (returns
    ``N x D_H``) or a batch ``x[B, L, N, C]`` with index arrays of length B
    (returns ``B x N x D_H``). Column blocks are ordered feature, node,
    time-of-day, day-of-week.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = x.ndim == 3
    if single:
        x = x[None]
    tod = np.atleast_1d(np.asarray(tod_idx, dtype=np.int64))
    dow = np.atleast_1d(np.asarray(dow_idx, dtype=np.int64))
    B, L, N, C = x.shape
    if p.E_S.shape[0] != N:
        raise K.ShapeError(f"input has {N} nodes, node table has {p.E_S.shape[0]}")
    if p.W_F.shape[0] != L * C:
        raise K.ShapeError(f"feature projection expects L*C={p.W_F.shape[0]}, got {L}*{C}")
    flat = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(B, N, L * C)
    feat = K.affine(Tensor(flat.astype(p.W_F.dtype, copy=False)), p.W_F, p.b_F)
    node = K.expand(p.E_S, 0, B)
    day = K.expand(K.take_rows(p.E_d, tod), 1, N)
    week = K.expand(K.take_rows(p.E_w, dow), 1, N)
    H = K.concat_last_dim([feat, node, day, week])
    if single:
        H = K.reshape(H, H.shape[1:])
    return H
