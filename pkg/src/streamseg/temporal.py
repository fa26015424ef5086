"""Cross-frame feature consistency with stop-gradient.

Corresponding points of frames t and t-w are pushed through the encoder and
predictor heads; the predictor output of one frame is pulled toward the
(detached) encoder output of the other, weighted by the *other* frame's
cached confidence so low-confidence features align to high-confidence ones.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .errors import DegenerateVector
from .model import NetworkParams, TemporalBatch

_NORM_EPS = 1e-12


def negative_cosine(q, z, s_weight: float = 1.0) -> float:
    """Confidence-weighted negative cosine similarity of two vectors.

    z is conceptually held constant (stop-gradient); this scalar form is the
    value only.
    """
    q = np.asarray(q, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    nq = np.linalg.norm(q)
    nz = np.linalg.norm(z)
    if nq <= _NORM_EPS or nz <= _NORM_EPS:
        raise DegenerateVector("cannot normalize a (near-)zero vector")
    return float(-s_weight * np.dot(q / nq, z / nz))


def _valid_pair_mask(e_t, q_t, e_prev, q_prev, idx_t, idx_prev):
    """Pairs whose encoder/predictor outputs are all normalizable."""
    def ok(x):
        return np.linalg.norm(x, axis=1) > _NORM_EPS

    return (ok(e_t[idx_t]) & ok(q_t[idx_t]) & ok(e_prev[idx_prev]) & ok(q_prev[idx_prev]))


def temporal_term(leaves, z_t, batch: TemporalBatch):
    """Graph-level symmetric consistency loss; None when no usable pair.

    Gradients flow only through the predictor branch of each direction; the
    encoder branch is detached. Degenerate pairs are skipped.
    """
    e_t, q_t = model_mod.heads_graph(leaves, z_t)
    _, z_prev, _ = model_mod.forward_graph(leaves, batch.features_prev)
    e_prev, q_prev = model_mod.heads_graph(leaves, z_prev)

    keep = _valid_pair_mask(e_t.value, q_t.value, e_prev.value, q_prev.value,
                            batch.idx_t, batch.idx_prev)
    idx_t = batch.idx_t[keep]
    idx_prev = batch.idx_prev[keep]
    if len(idx_t) == 0:
        return None

    if batch.confidence_weighted:
        w_fwd = batch.s_prev[idx_prev]   # weight of the z^{t-w} side
        w_bwd = batch.s_t[idx_t]         # weight of the z^t side
    else:
        w_fwd = np.ones(len(idx_t))
        w_bwd = np.ones(len(idx_t))

    qn_t = ad.l2_normalize_rows(ad.gather_rows(q_t, idx_t))
    qn_prev = ad.l2_normalize_rows(ad.gather_rows(q_prev, idx_prev))
    zn_prev = ad.stop_gradient(ad.l2_normalize_rows(ad.gather_rows(e_prev, idx_prev)))
    zn_t = ad.stop_gradient(ad.l2_normalize_rows(ad.gather_rows(e_t, idx_t)))

    fwd = ad.mul(ad.Tensor(w_fwd), ad.rows_dot(qn_t, zn_prev))
    bwd = ad.mul(ad.Tensor(w_bwd), ad.rows_dot(qn_prev, zn_t))
    return ad.neg(ad.mean_all(ad.scale(ad.add(fwd, bwd), 0.5)))


def temporal_loss(params: NetworkParams, features_t, features_prev, pairs,
                  s_t, s_prev, confidence_weighted: bool = True):
    """Standalone symmetric consistency loss with parameter gradients.

    `pairs` is a CorrespondenceSet; empty input gives zero loss and zero
    gradients. Returns (loss, grads dict, number of pairs skipped as
    degenerate).
    """
    grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    if len(pairs) == 0:
        return 0.0, grads, 0

    batch = TemporalBatch(
        features_prev=np.asarray(features_prev, dtype=np.float64),
        idx_t=np.asarray(pairs.idx_t, dtype=np.int64),
        idx_prev=np.asarray(pairs.idx_prev, dtype=np.int64),
        s_t=np.asarray(s_t, dtype=np.float64),
        s_prev=np.asarray(s_prev, dtype=np.float64),
        confidence_weighted=confidence_weighted,
    )
    leaves = model_mod.make_leaves(params)
    _, z_t, _ = model_mod.forward_graph(leaves, np.asarray(features_t, dtype=np.float64))
    loss_t = temporal_term(leaves, z_t, batch)
    if loss_t is None:
        return 0.0, grads, len(pairs)

    e_t, q_t = model_mod.heads(params, z_t.value)
    probs = model_mod.forward(params, batch.features_prev)
    e_prev, q_prev = model_mod.heads(params, probs[1])
    skipped = int((~_valid_pair_mask(e_t, q_t, e_prev, q_prev,
                                     batch.idx_t, batch.idx_prev)).sum())

    ad.backward(loss_t)
    for name in grads:
        if leaves[name].grad is not None:
            grads[name] = leaves[name].grad
    return float(loss_t.value), grads, skipped
