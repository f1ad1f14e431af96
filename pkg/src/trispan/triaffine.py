"""Triaffine attention and scoring over spans.

The central primitive is a trilinear form between three transformed vectors
and a rank-3 tensor.  The two boundary inputs go through their own heads and
get a constant 1 appended (so the form retains its bilinear part); the
content input goes through a third head, which is the identity at scoring
sites.  Per-label tensors keep attention weights and scores label-wise.

Scoring comes in two algebraically identical flavours: the naive order
aggregates content vectors first and evaluates the trilinear form once per
span, and the decomposed order evaluates the form per content vector and
aggregates the resulting scalars.  They coincide exactly when the scoring
site's content head is the identity, because the form is linear in its
content argument; the decomposed order is cheaper because the contraction
against the two boundaries is computed once and shared across the content
vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    MlpParams,
    Tensor,
    add,
    append_ones,
    broadcast_to,
    concat,
    einsum,
    gather_rows,
    init_mlp,
    masked_softmax,
    mlp_apply,
    mode_n_mul,
    reshape,
    softmax,
)

ABLATION_SETTINGS = "abcdefgh"


@dataclass
class TriaffineSite:
    """Per-label rank-3 tensors plus the heads feeding each mode.

    `tensors` is (labels, d+1, d, d+1); `left`/`right` transform the boundary
    vectors (before the constant-1 append) and `content` transforms the third
    input.  A 0-layer content head marks a scoring site eligible for the
    decomposed evaluation order.
    """

    tensors: Tensor
    left: MlpParams
    right: MlpParams
    content: MlpParams

    @property
    def labels(self) -> int:
        return self.tensors.shape[0]

    @property
    def width(self) -> int:
        return self.tensors.shape[2]

    def parameters(self) -> list[Tensor]:
        return [
            self.tensors,
            *self.left.parameters(),
            *self.right.parameters(),
            *self.content.parameters(),
        ]


def init_site(
    labels: int,
    width: int,
    rng: np.random.Generator,
    init_std: float,
    boundary_depth: int = 1,
    content_depth: int = 1,
    activation: str = "relu",
    name: str = "site",
) -> TriaffineSite:
    """Allocate one site: tensors ~ Normal(0, init_std^2), heads of the given depths."""
    shape = (labels, width + 1, width, width + 1)
    tensors = Tensor(rng.normal(0.0, init_std, shape), requires_grad=True, name=f"{name}.tensors")
    dims = lambda depth: [width] * (depth + 1)
    return TriaffineSite(
        tensors=tensors,
        left=init_mlp(dims(boundary_depth), rng, activation, name=f"{name}.left"),
        right=init_mlp(dims(boundary_depth), rng, activation, name=f"{name}.right"),
        content=init_mlp(dims(content_depth), rng, activation, name=f"{name}.content"),
    )


@dataclass
class SpanTable:
    """Per-sentence record of the two scoring stages (detached numpy views).

    `spans` lists the enumerated spans (1-based inclusive); `logits` holds the
    intermediate stage aligned with `spans`; `retained`, `beta`, and
    `cross_logits` describe the filtered second stage when it ran.
    """

    spans: list[tuple[int, int]]
    logits: np.ndarray
    alpha: np.ndarray | None = None
    retained: list[tuple[int, int]] = field(default_factory=list)
    beta: np.ndarray | None = None
    cross_logits: np.ndarray | None = None


# ---------------------------------------------------------------------------
# scalar forms (reference semantics; the dense paths below must agree)
# ---------------------------------------------------------------------------

def triaff(
    u: Tensor,
    v: Tensor,
    w: Tensor,
    tensor: Tensor,
    left: MlpParams,
    right: MlpParams,
    content: MlpParams,
) -> Tensor:
    """Trilinear form: contract `tensor` with [left(u);1], content(w), [right(v);1]."""
    if tensor.ndim != 3:
        raise ShapeError(f"triaff needs a rank-3 tensor, got rank {tensor.ndim}")
    u2 = append_ones(mlp_apply(left, u))
    v2 = append_ones(mlp_apply(right, v))
    w2 = mlp_apply(content, w)
    m = mode_n_mul(tensor, u2, 1)  # (width, width+1)
    mw = einsum("bc,c->b", m, v2)
    return einsum("b,b->", mw, w2)


def score_naive(
    h_left: Tensor,
    h_right: Tensor,
    rep: Tensor,
    tensor: Tensor,
    left: MlpParams,
    right: MlpParams,
    content: MlpParams,
) -> Tensor:
    """Score an aggregated representation: the trilinear form applied once."""
    return triaff(h_left, h_right, rep, tensor, left, right, content)


def score_decomposed(
    h_left: Tensor,
    h_right: Tensor,
    values: Tensor,
    weights: Tensor,
    tensor: Tensor,
    left: MlpParams,
    right: MlpParams,
    content: MlpParams | None = None,
) -> Tensor:
    """Weighted sum of per-item trilinear forms over already-transformed values.

    `values` is (items, width): the same vectors the attention aggregation
    sums; `weights` is the (items,) probability vector.  Valid only when the
    scoring content head is the identity; a deeper head raises, because the
    two evaluation orders then stop agreeing.
    """
    if content is not None and content.depth > 0:
        raise ConfigError(
            "decomposition invalid: the scoring content head must be the identity (0 layers)"
        )
    if values.ndim != 2 or weights.ndim != 1 or values.shape[0] != weights.shape[0]:
        raise ShapeError(
            f"values {values.shape} and weights {weights.shape} must pair along the item axis"
        )
    u2 = append_ones(mlp_apply(left, h_left))
    v2 = append_ones(mlp_apply(right, h_right))
    per_item = einsum("abc,a,gb,c->g", tensor, u2, values, v2)
    return einsum("g,g->", weights, per_item)


# ---------------------------------------------------------------------------
# per-span attention (reference semantics)
# ---------------------------------------------------------------------------

def span_attention(
    h: Tensor,
    i: int,
    j: int,
    site: TriaffineSite,
    values: MlpParams,
) -> tuple[Tensor, Tensor]:
    """Label-wise attention over the tokens of span (i, j), 1-based inclusive.

    Returns (alpha, reps): alpha is (j - i + 1, labels) with columns summing
    to one, reps is (labels, width), each row a convex combination of the
    value-transformed tokens.
    """
    n = h.shape[0]
    if not 1 <= i <= j <= n:
        raise ValueError(f"span ({i}, {j}) is not a valid span of a {n}-token sentence")
    idx = np.arange(i - 1, j)
    u2 = append_ones(mlp_apply(site.left, gather_rows(h, [i - 1])))  # (1, d+1)
    v2 = append_ones(mlp_apply(site.right, gather_rows(h, [j - 1])))
    toks = gather_rows(h, idx)
    w2 = mlp_apply(site.content, toks)
    scores = einsum("rabc,xa,kb,xc->kr", site.tensors, u2, w2, v2)
    alpha = softmax(scores, axis=0)
    vals = mlp_apply(values, toks)
    reps = einsum("kr,kd->rd", alpha, vals)
    return alpha, reps


def cross_span_attention(
    h: Tensor,
    span_reps: Tensor,
    candidates: list[tuple[int, int]],
    target: tuple[int, int],
    site: TriaffineSite,
    values: MlpParams,
) -> tuple[Tensor, Tensor]:
    """Label-wise attention of `target` over candidate spans' representations.

    `span_reps` is (candidates, labels, width), aligned with `candidates`,
    which must contain the target span itself.  Returns (beta, reps) with
    beta (candidates, labels) summing to one per label.
    """
    if len(candidates) == 0:
        raise ValueError("cross-span attention needs a non-empty candidate set")
    if target not in candidates:
        raise ValueError(f"candidate set must contain the target span {target}")
    if span_reps.shape[0] != len(candidates):
        raise ShapeError(
            f"{len(candidates)} candidates but span_reps has {span_reps.shape[0]} rows"
        )
    i, j = target
    u2 = append_ones(mlp_apply(site.left, gather_rows(h, [i - 1])))
    v2 = append_ones(mlp_apply(site.right, gather_rows(h, [j - 1])))
    keys = mlp_apply(site.content, span_reps)
    scores = einsum("rabc,xa,grb,xc->gr", site.tensors, u2, keys, v2)
    beta = softmax(scores, axis=0)
    vals = mlp_apply(values, span_reps)
    reps = einsum("gr,grd->rd", beta, vals)
    return beta, reps


# ---------------------------------------------------------------------------
# dense whole-sentence paths (used by the pipeline and the bench)
# ---------------------------------------------------------------------------

def span_mask(n: int, max_len: int = 0) -> np.ndarray:
    """Valid (i, j, k) triples, 0-based: i <= k <= j, span length capped by max_len."""
    idx = np.arange(n)
    i = idx[:, None, None]
    j = idx[None, :, None]
    k = idx[None, None, :]
    mask = (i <= k) & (k <= j)
    if max_len > 0:
        mask &= (j - i + 1) <= max_len
    return mask


def boundary_maps(site: TriaffineSite, h: Tensor) -> tuple[Tensor, Tensor]:
    """Left/right boundary features for all tokens, constant-1 appended: (n, d+1)."""
    return (
        append_ones(mlp_apply(site.left, h)),
        append_ones(mlp_apply(site.right, h)),
    )


def attention_table(site: TriaffineSite, h: Tensor, mask: np.ndarray) -> Tensor:
    """Attention weights alpha (n, n, n, labels) over every masked span.

    Rows of invalid spans are all-zero; valid rows sum to one over the token
    axis.
    """
    u2, v2 = boundary_maps(site, h)
    w2 = mlp_apply(site.content, h)
    scores = einsum("rabc,ia,kb,jc->ijkr", site.tensors, u2, w2, v2)
    full_mask = np.broadcast_to(mask[..., None], scores.shape)
    return masked_softmax(scores, full_mask, axis=2)


def score_table_decomposed(site: TriaffineSite, h: Tensor, alpha: Tensor, values: Tensor) -> Tensor:
    """Intermediate logits (n, n, labels): per-token forms aggregated by alpha."""
    if site.content.depth > 0:
        raise ConfigError(
            "decomposition invalid: the scoring content head must be the identity (0 layers)"
        )
    u2, v2 = boundary_maps(site, h)
    per_token = einsum("rabc,ia,kb,jc->ijkr", site.tensors, u2, values, v2)
    return einsum("ijkr,ijkr->ijr", alpha, per_token)


def score_table_naive(site: TriaffineSite, h: Tensor, alpha: Tensor, values: Tensor) -> Tensor:
    """Intermediate logits (n, n, labels): aggregate first, then one form per span."""
    u2, v2 = boundary_maps(site, h)
    reps = einsum("ijkr,kd->ijrd", alpha, values)
    if site.content.depth > 0:
        reps = mlp_apply(site.content, reps)
    return einsum("rabc,ia,ijrb,jc->ijr", site.tensors, u2, reps, v2)


def cross_attention_table(
    site: TriaffineSite,
    h: Tensor,
    span_reps: Tensor,
    left_idx: np.ndarray,
    right_idx: np.ndarray,
) -> Tensor:
    """Attention beta (targets, candidates, labels) of retained spans over each other."""
    u2_all, v2_all = boundary_maps(site, h)
    u2 = gather_rows(u2_all, left_idx)
    v2 = gather_rows(v2_all, right_idx)
    keys = mlp_apply(site.content, span_reps)
    scores = einsum("rabc,la,grb,lc->lgr", site.tensors, u2, keys, v2)
    return softmax(scores, axis=1)


def cross_score_table(
    site: TriaffineSite,
    h: Tensor,
    beta: Tensor,
    values: Tensor,
    left_idx: np.ndarray,
    right_idx: np.ndarray,
) -> Tensor:
    """Final logits (targets, labels) via the decomposed order over candidates."""
    if site.content.depth > 0:
        raise ConfigError(
            "decomposition invalid: the scoring content head must be the identity (0 layers)"
        )
    u2_all, v2_all = boundary_maps(site, h)
    u2 = gather_rows(u2_all, left_idx)
    v2 = gather_rows(v2_all, right_idx)
    per_candidate = einsum("rabc,la,grb,lc->lgr", site.tensors, u2, values, v2)
    return einsum("lgr,lgr->lr", beta, per_candidate)


# ---------------------------------------------------------------------------
# ablation variants
# ---------------------------------------------------------------------------
#
# Eight settings select among attention and scoring designs:
#   a  biaffine baseline on the two boundary tokens; no span representation
#   b  triaffine attention, linear label-wise scoring of the span representation
#   c  triaffine attention with one shared tensor (no label factor), triaffine scoring
#   d  label-query dot-product attention (no boundary factor), triaffine scoring
#   e  linear attention over concatenated (left, right, token), triaffine scoring
#   f  triaffine attention, linear scoring over concatenated (left, right, span rep)
#   g  full triaffine attention and scoring, intermediate predictions
#   h  setting g plus the filtered cross-span stage for final predictions


def biaffine_table(tensors: Tensor, h: Tensor) -> Tensor:
    """Setting (a): logits (n, n, labels) from [h_i;1]^T V_r [h_j;1]."""
    if tensors.ndim != 3:
        raise ShapeError(f"biaffine needs (labels, d+1, d+1) tensors, got rank {tensors.ndim}")
    u2 = append_ones(h)
    v2 = append_ones(h)
    return einsum("rac,ia,jc->ijr", tensors, u2, v2)


def linear_attention_scores(
    w_left: Tensor, w_right: Tensor, w_token: Tensor, bias: Tensor, h: Tensor
) -> Tensor:
    """Setting (e): scores (n, n, n, labels), an affine map of (h_i || h_j || h_k)."""
    n = h.shape[0]
    r = bias.shape[0]
    a = reshape(einsum("rd,id->ir", w_left, h), (n, 1, 1, r))
    b = reshape(einsum("rd,jd->jr", w_right, h), (1, n, 1, r))
    c = reshape(einsum("rd,kd->kr", w_token, h), (1, 1, n, r))
    return add(add(add(a, b), c), reshape(bias, (1, 1, 1, r)))


def label_query_scores(queries: Tensor, h: Tensor, n: int) -> Tensor:
    """Setting (d): scores (n, n, n, labels) that depend on the token only."""
    r = queries.shape[0]
    per_token = reshape(einsum("rd,kd->kr", queries, h), (1, 1, n, r))
    return broadcast_to(per_token, (n, n, n, r))


def linear_score_table(
    w_left: Tensor, w_right: Tensor, w_rep: Tensor, bias: Tensor, h: Tensor, reps: Tensor
) -> Tensor:
    """Setting (f)/(b): logits (n, n, labels), affine in boundaries and span rep.

    Setting (b) drops the boundary factor by passing zero boundary weights.
    """
    n = h.shape[0]
    r = bias.shape[0]
    a = reshape(einsum("rd,id->ir", w_left, h), (n, 1, r))
    b = reshape(einsum("rd,jd->jr", w_right, h), (1, n, r))
    c = einsum("rd,ijrd->ijr", w_rep, reps)
    return add(add(add(a, b), c), reshape(bias, (1, 1, r)))
