"""Prototype-based component grouping over encoded tokens.

A small bank of learnable prototypes is refreshed against the encoded tokens
of the complete cloud (single-head attention, no projections), tokens are
enhanced by cross-attending to the refreshed prototypes, and a row-softmax
similarity between the two yields a hard component assignment per token.

Two losses train this branch: a reconstruction loss that decodes each token's
(prototype, position-embedding) pair back to a piece of the cloud, and a
contrastive loss that pushes refreshed prototypes apart in cosine similarity.
The encoder pass feeding this module always runs under stop-gradient, so
these losses touch only the prototype bank, the enhancement cross-attention,
and the reconstruction head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import backbone
from . import geometry as geo
from .autodiff import Tensor
from .config import RunConfig
from .errors import InvalidArgument


def init_pcsm_params(store: ad.ParamStore, cfg: RunConfig) -> None:
    c = cfg.dim
    store.create("pcsm.prototypes", (cfg.n_prototypes, c))
    for name in ("wq", "wk", "wv", "wo"):
        store.create(f"pcsm.enhance.{name}", (c, c))
        store.create(f"pcsm.enhance.b{name[1]}", (c,), init="zeros")
    store.create("pcsm.enhance.ln.g", (c,), init="ones")
    store.create("pcsm.enhance.ln.b", (c,), init="zeros")
    kp = cfg.recon_points
    store.create("pcsm.ppr.w0", (2 * c, 2 * c))
    store.create("pcsm.ppr.b0", (2 * c,), init="zeros")
    store.create("pcsm.ppr.w1", (2 * c, 3 * kp))
    store.create("pcsm.ppr.b1", (3 * kp,), init="zeros")


def knorm_enhance(tokens: np.ndarray, centers: np.ndarray, k: int,
                  eps: float = 1e-8) -> np.ndarray:
    """Widen each token's receptive field using its k nearest token peers.

    For token i, gather the k tokens whose patch centres are nearest (self
    included, ties by index), z-score token i per channel against the
    gathered block's statistics, and add that z-scored row back onto the
    token (residual).  Pooling the z-scored block instead would cancel
    exactly (z-scores sum to zero over the axis that defined them), so the
    residual carries the token's own deviation from its neighbourhood.
    Zero-variance channels contribute exactly zero (the guard keeps the
    divide finite), so k=1 or an all-identical token set returns the input
    unchanged.

    Parameter free and applied only to stop-gradient features, so it is plain
    numpy.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    g = tokens.shape[0]
    if centers.shape[0] != g:
        raise InvalidArgument(f"{g} tokens but {centers.shape[0]} centres")
    if not 1 <= k <= g:
        raise InvalidArgument(f"knorm k={k} out of range for {g} tokens")
    neighborhoods = geo.knn(centers, np.arange(g), k)
    members = np.stack([nb.member_indices for nb in neighborhoods])   # (G, k)
    gathered = tokens[members]                                        # (G, k, C)
    mu = gathered.mean(axis=1)
    sd = gathered.std(axis=1)
    return tokens + (tokens - mu) / (sd + eps)


def update_prototypes(prototypes: Tensor, tokens: Tensor) -> Tensor:
    """Refresh the bank against encoded tokens.

    Single-head attention with no projections: each refreshed prototype is a
    softmax(p T^T / sqrt(C))-weighted average of token rows, hence always
    inside the tokens' convex hull.
    """
    if prototypes.values.shape[-1] != tokens.values.shape[-1]:
        raise InvalidArgument("prototype and token widths differ")
    return ad.multi_head_attention(prototypes, tokens, tokens, heads=1)


def enhance_tokens(tokens: Tensor, prototypes_hat: Tensor,
                   params: Mapping[str, Tensor], cfg: RunConfig) -> Tensor:
    """Cross-attention from tokens to refreshed prototypes, residual + LN."""
    q = ad.linear(tokens, params["pcsm.enhance.wq"], params["pcsm.enhance.bq"])
    k = ad.linear(prototypes_hat, params["pcsm.enhance.wk"], params["pcsm.enhance.bk"])
    v = ad.linear(prototypes_hat, params["pcsm.enhance.wv"], params["pcsm.enhance.bv"])
    att = ad.multi_head_attention(q, k, v, cfg.heads)
    att = ad.linear(att, params["pcsm.enhance.wo"], params["pcsm.enhance.bo"])
    return ad.layer_norm(ad.add(tokens, att),
                         params["pcsm.enhance.ln.g"], params["pcsm.enhance.ln.b"])


def similarity(tokens_hat: Tensor, prototypes_hat: Tensor) -> tuple[Tensor, np.ndarray]:
    """Row-softmax similarity and the hard component assignment.

    Returns (S, assignment): S[i, q] = softmax over q of token-prototype
    similarity scaled by 1/sqrt(C); assignment[i] = argmax_q S[i, q], ties to
    the lowest prototype id.  Scaling every token by a positive constant
    scales all logits in a row equally, so the assignment is scale invariant.
    """
    c = tokens_hat.values.shape[-1]
    logits = ad.scale(ad.matmul(tokens_hat, ad.transpose(prototypes_hat)), 1.0 / math.sqrt(c))
    s = ad.softmax_rows(logits)
    return s, np.argmax(s.values, axis=1).astype(np.int64)


def ppr_reconstruct(prototypes_hat: Tensor, pos: Tensor, assignment: np.ndarray,
                    cloud_points: np.ndarray, params: Mapping[str, Tensor],
                    cfg: RunConfig) -> tuple[np.ndarray, Tensor]:
    """Reconstruct the whole cloud from (assigned prototype, position) pairs.

    Token i contributes the row [p_hat[assignment[i]] || pos[i]]; rows stay in
    original token order.  A two-layer head maps each row to k' points and the
    loss is the global chamfer distance to the cloud, scaled by 1/G.  Empty
    components are legal; they simply contribute no rows.
    """
    g = pos.values.shape[0]
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (g,):
        raise InvalidArgument(f"assignment must be ({g},), got {assignment.shape}")
    if assignment.size and (assignment.min() < 0
                            or assignment.max() >= prototypes_hat.values.shape[0]):
        raise InvalidArgument("assignment indexes a missing prototype")
    kp = cfg.recon_points
    f = ad.concat_last_dim([ad.gather_rows(prototypes_hat, assignment), pos])
    h = ad.gelu(ad.linear(f, params["pcsm.ppr.w0"], params["pcsm.ppr.b0"]))
    out = ad.linear(h, params["pcsm.ppr.w1"], params["pcsm.ppr.b1"])
    pred = ad.reshape(out, (g * kp, 3))
    loss = ad.scale(ad.chamfer(pred, Tensor(np.asarray(cloud_points, dtype=np.float64))),
                    1.0 / g)
    return pred.values.reshape(g, kp, 3), loss


def l_cont(prototypes_hat: Tensor, temperature: float) -> Tensor:
    """Contrastive separation of refreshed prototypes.

    Rows are L2-normalised (1e-12 floor), pairwise cosine similarities D are
    divided by the temperature, and the loss is
    sum_i [logsumexp_j D_ij - D_ii].  Since D_ii = 1 identically, the
    diagonal contributes the constant Q/temperature; the loss is therefore
    invariant to prototype order and strictly decreases as off-diagonal
    similarity falls.
    """
    if temperature <= 0.0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    q = prototypes_hat.values.shape[0]
    pn = ad.l2_normalize_rows(prototypes_hat)
    d = ad.scale(ad.matmul(pn, ad.transpose(pn)), 1.0 / temperature)
    lse = ad.logsumexp_rows(d)
    return ad.add(ad.sum_all(lse), Tensor(np.float64(-q / temperature)))


@dataclass
class PCSMOutput:
    """Everything the component-grouping branch produces for one cloud."""

    tokens_encoded: np.ndarray      # (G, C) stop-gradient encoder output (post k-norm)
    prototypes_hat: Tensor          # (Q, C)
    tokens_hat: Tensor              # (G, C) enhanced tokens
    similarity: np.ndarray          # (G, Q) row-stochastic
    assignment: np.ndarray          # (G,) int64
    reconstruction: np.ndarray      # (G, k', 3)
    loss_proto: Tensor
    loss_cont: Tensor


def pcsm_forward(token_values: np.ndarray, centers: np.ndarray, pos_values: np.ndarray,
                 cloud_points: np.ndarray, store: ad.ParamStore,
                 cfg: RunConfig) -> PCSMOutput:
    """Full component-grouping pass on a complete cloud.

    ``token_values``/``pos_values`` are raw arrays (the stop-gradient boundary:
    the encoder runs here on constants through frozen weights, so no gradient
    reaches it).  Trainable inputs are the prototype bank, the enhancement
    cross-attention, and the reconstruction head.
    """
    frozen = store.frozen()
    te = backbone.encode(Tensor(np.asarray(token_values, dtype=np.float64)),
                         Tensor(np.asarray(pos_values, dtype=np.float64)), frozen, cfg)
    te_np = te.values
    if cfg.knorm_enabled:
        te_np = knorm_enhance(te_np, centers, cfg.knorm_k)
    te_const = Tensor(te_np)
    p_hat = update_prototypes(store["pcsm.prototypes"], te_const)
    t_hat = enhance_tokens(te_const, p_hat, store, cfg)
    s, assignment = similarity(t_hat, p_hat)
    recon, loss_proto = ppr_reconstruct(p_hat, Tensor(pos_values), assignment,
                                        cloud_points, store, cfg)
    loss_cont = l_cont(p_hat, cfg.cont_temperature)
    return PCSMOutput(
        tokens_encoded=te_np,
        prototypes_hat=p_hat,
        tokens_hat=t_hat,
        similarity=s.values,
        assignment=assignment,
        reconstruction=recon,
        loss_proto=loss_proto,
        loss_cont=loss_cont,
    )
