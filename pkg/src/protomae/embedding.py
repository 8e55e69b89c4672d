"""Patch construction and token embedding.

A cloud becomes G tokens in three steps: farthest-point sampling picks patch
centres, k-nearest-neighbour gathering builds centre-relative local patches,
and a shared mini-PointNet maps each patch to a C-dimensional token.  Because
the network only ever sees local coordinates, tokens are translation
invariant; all absolute position information travels separately through
``pos_embed`` (a single affine map of the centre coordinates).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .config import RunConfig
from .errors import InvalidArgument


@dataclass
class TokenBatch:
    """Tokens plus the patch geometry they were built from."""

    center_indices: np.ndarray      # (G,) into the source cloud
    centers: np.ndarray             # (G, 3)
    member_indices: np.ndarray      # (G, k)
    local_coords: np.ndarray        # (G, k, 3) member minus centre
    tokens: Tensor                  # (G, C)

    @property
    def g(self) -> int:
        return self.centers.shape[0]


def init_embedding_params(store: ad.ParamStore, cfg: RunConfig) -> None:
    h1, h2, c = cfg.embed_hidden1, cfg.embed_hidden2, cfg.dim
    store.create("embed.mlp1.w0", (3, h1))
    store.create("embed.mlp1.b0", (h1,), init="zeros")
    store.create("embed.mlp1.w1", (h1, h2))
    store.create("embed.mlp1.b1", (h2,), init="zeros")
    store.create("embed.mlp2.w0", (2 * h2, 2 * h2))
    store.create("embed.mlp2.b0", (2 * h2,), init="zeros")
    store.create("embed.mlp2.w1", (2 * h2, c))
    store.create("embed.mlp2.b1", (c,), init="zeros")
    store.create("embed.pos.w", (3, c))
    store.create("embed.pos.b", (c,), init="zeros")


def tokenize(points: np.ndarray, params: Mapping[str, Tensor], cfg: RunConfig,
             start: int = 0) -> TokenBatch:
    """Embed a cloud into G tokens of width C.

    The mini-PointNet is the usual two-stage construction: a shared per-point
    MLP, max-pool over the patch, the pooled vector concatenated back onto
    every point feature, a second shared MLP, and a final max-pool.  Patch
    order follows the farthest-point pick order; ``start`` selects the first
    pick (fixed for evaluation, drawn from the training RNG during training).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < cfg.n_patches or n < cfg.knn_k:
        raise InvalidArgument(
            f"cloud of {n} points cannot supply {cfg.n_patches} patches of {cfg.knn_k} members")
    g, k = cfg.n_patches, cfg.knn_k
    center_idx = geo.fps(pts, g, start=start)
    neighborhoods = geo.knn(pts, center_idx, k)
    members = np.stack([nb.member_indices for nb in neighborhoods])
    local = np.stack([nb.local_coords for nb in neighborhoods])

    x = Tensor(local.reshape(g * k, 3))
    h = ad.relu(ad.linear(x, params["embed.mlp1.w0"], params["embed.mlp1.b0"]))
    h = ad.linear(h, params["embed.mlp1.w1"], params["embed.mlp1.b1"])
    h = ad.reshape(h, (g, k, h.values.shape[-1]))
    pooled = ad.max_over_rows(h)
    h = ad.concat_last_dim([h, ad.repeat_middle(pooled, k)])
    h = ad.relu(ad.linear(h, params["embed.mlp2.w0"], params["embed.mlp2.b0"]))
    h = ad.linear(h, params["embed.mlp2.w1"], params["embed.mlp2.b1"])
    tokens = ad.max_over_rows(h)

    return TokenBatch(
        center_indices=center_idx,
        centers=pts[center_idx],
        member_indices=members,
        local_coords=local,
        tokens=tokens,
    )


def pos_embed(centers: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """Affine map of absolute centre coordinates to token width."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 3:
        raise InvalidArgument(f"pos_embed expects (G, 3) centres, got {centers.shape}")
    return ad.linear(Tensor(centers), params["embed.pos.w"], params["embed.pos.b"])
