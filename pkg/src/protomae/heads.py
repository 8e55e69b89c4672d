"""Classification heads: plain class-token readout and the prototype-prompted variant.

Both heads prepend a learnable class token to the patch tokens and encode the
sequence with the pretrained encoder.  The prompted variant additionally feeds
the refreshed prototypes in as extra sequence rows between the class token and
the patch tokens; prototypes are not spatial, so those rows carry a zero
position embedding while the class token gets a learnable one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import backbone, embedding, pcsm
from .autodiff import Tensor
from .config import RunConfig
from .errors import ConfigError, InvalidArgument


def init_head_params(store: ad.ParamStore, cfg: RunConfig, n_classes: int,
                     csep: bool) -> None:
    """Create the class token, its position, and the two-layer readout.

    The readout input width is 2C for the plain head and 3C for the prompted
    one; the extra C slice is the pooled encoded-prototype feature.
    """
    if n_classes < 2:
        raise InvalidArgument(f"need at least 2 classes, got {n_classes}")
    c = cfg.dim
    store.create("cls.token", (1, c))
    store.create("cls.pos", (1, c))
    width = (3 if csep else 2) * c
    store.create("cls.head.w0", (width, cfg.head_hidden))
    store.create("cls.head.b0", (cfg.head_hidden,), init="zeros")
    store.create("cls.head.w1", (cfg.head_hidden, n_classes))
    store.create("cls.head.b1", (n_classes,), init="zeros")


@dataclass
class ClassFeatures:
    """Pooled per-cloud features, concatenated in a fixed order."""

    t_cls: Tensor           # (1, C) encoded class token
    f_g: Tensor             # (1, C) max-pool over encoded patch tokens
    p_g: Tensor | None      # (1, C) max-pool over encoded prototype rows

    def concat(self) -> Tensor:
        parts = [self.t_cls, self.f_g] if self.p_g is None \
            else [self.t_cls, self.p_g, self.f_g]
        return ad.concat_last_dim(parts)


def head_logits(features: Tensor, store: ad.ParamStore) -> Tensor:
    w0 = store["cls.head.w0"]
    if features.values.shape[-1] != w0.values.shape[0]:
        raise InvalidArgument(
            f"feature width {features.values.shape[-1]} does not match head "
            f"input width {w0.values.shape[0]}")
    h = ad.gelu(ad.linear(features, w0, store["cls.head.b0"]))
    return ad.linear(h, store["cls.head.w1"], store["cls.head.b1"])


def _pool_row(rows: Tensor, c: int) -> Tensor:
    return ad.reshape(ad.max_over_rows(rows), (1, c))


def classify_baseline(points: np.ndarray, store: ad.ParamStore,
                      cfg: RunConfig) -> Tensor:
    """Logits for one cloud from [class token || patch tokens]."""
    tb = embedding.tokenize(points, store, cfg)
    pos = embedding.pos_embed(tb.centers, store)
    seq = ad.concat_rows([store["cls.token"], tb.tokens])
    pos_seq = ad.concat_rows([store["cls.pos"], pos])
    enc = backbone.encode(seq, pos_seq, store, cfg)
    g = tb.tokens.values.shape[0]
    feats = ClassFeatures(t_cls=ad.slice_rows(enc, 0, 1),
                          f_g=_pool_row(ad.slice_rows(enc, 1, 1 + g), cfg.dim),
                          p_g=None)
    return head_logits(feats.concat(), store)


def classify_csep(points: np.ndarray, store: ad.ParamStore, cfg: RunConfig,
                  prompt_rows: np.ndarray | None = None) -> Tensor:
    """Logits for one cloud with refreshed prototypes as prompt rows.

    The encoder sees [class token || Q prototype rows || patch tokens]; the
    prototype rows get a zero position embedding.  The pooled encoded
    prototypes become the middle slice of the 3C readout input.

    ``prompt_rows`` substitutes fixed values for the refreshed prototypes
    (the readout block-structure check feeds zeros here); normally the
    prompts come from the prototype bank against this cloud's own encoded
    tokens, with the token features treated as constants exactly as during
    pre-training.
    """
    if "pcsm.prototypes" not in store:
        raise ConfigError("prompted classification needs pre-trained prototypes; "
                          "load a pre-training checkpoint first")
    c = cfg.dim
    tb = embedding.tokenize(points, store, cfg)
    pos = embedding.pos_embed(tb.centers, store)
    if prompt_rows is None:
        te = backbone.encode(Tensor(tb.tokens.values), Tensor(pos.values),
                             store.frozen(), cfg)
        te_np = te.values
        if cfg.knorm_enabled:
            te_np = pcsm.knorm_enhance(te_np, tb.centers, cfg.knorm_k)
        p_hat = pcsm.update_prototypes(store["pcsm.prototypes"], Tensor(te_np))
    else:
        p_hat = Tensor(np.asarray(prompt_rows, dtype=np.float64))
        if p_hat.values.shape[-1] != c:
            raise InvalidArgument(f"prompt rows must be width {c}")
    q = p_hat.values.shape[0]
    g = tb.tokens.values.shape[0]
    seq = ad.concat_rows([store["cls.token"], p_hat, tb.tokens])
    pos_seq = ad.concat_rows([store["cls.pos"], Tensor(np.zeros((q, c))), pos])
    enc = backbone.encode(seq, pos_seq, store, cfg)
    feats = ClassFeatures(t_cls=ad.slice_rows(enc, 0, 1),
                          p_g=_pool_row(ad.slice_rows(enc, 1, 1 + q), c),
                          f_g=_pool_row(ad.slice_rows(enc, 1 + q, 1 + q + g), c))
    return head_logits(feats.concat(), store)
