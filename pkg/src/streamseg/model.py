"""Differentiable per-point segmenter, losses, and the Adam optimizer.

The network is a small fully connected stack applied pointwise:

    features (F) -> 64 -> 64 (ReLU)           backbone
                 -> 32                        embedding z
                 -> C + softmax               classifier
    z -> 32 -> 32 (ReLU hidden)               encoder head
    encoder out -> 16 -> 32 (ReLU hidden)     predictor head

All parameters are 64-bit; forward/backward are pure given a parameter
snapshot. Checkpoints are flat binary records with magic "HGL1".
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import IGNORE, ConfidenceField, LabelField, ProbabilityField
from .errors import CheckpointMismatch, IoFailure, MalformedRecord, NoGroundTruth, ShapeMismatch

_MAGIC = b"HGL1"

_HIDDEN = 64
_EMBED = 32
_ENC = 32
_PRED_HIDDEN = 16


def _layer_specs(feature_dim: int, num_classes: int):
    """(name, fan_in, fan_out) in fixed checkpoint order."""
    return [
        ("backbone1", feature_dim, _HIDDEN),
        ("backbone2", _HIDDEN, _HIDDEN),
        ("embed", _HIDDEN, _EMBED),
        ("classifier", _EMBED, num_classes),
        ("enc1", _EMBED, _ENC),
        ("enc2", _ENC, _ENC),
        ("pred1", _ENC, _PRED_HIDDEN),
        ("pred2", _PRED_HIDDEN, _ENC),
    ]


@dataclass
class NetworkParams:
    """Named weight/bias arrays of the segmenter, in fixed topological order."""

    tensors: dict

    @classmethod
    def init(cls, feature_dim: int, num_classes: int, seed: int = 0) -> "NetworkParams":
        """Glorot-uniform weights, zero biases, fixed seed."""
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, fan_in, fan_out in _layer_specs(feature_dim, num_classes):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[f"{name}_w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"{name}_b"] = np.zeros(fan_out)
        return cls(tensors)

    @property
    def feature_dim(self) -> int:
        return self.tensors["backbone1_w"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.tensors["classifier_w"].shape[1]

    def names(self):
        return [f"{n}_{s}" for n, _, _ in _layer_specs(self.feature_dim, self.num_classes)
                for s in ("w", "b")]

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()})

    def save(self, path) -> None:
        try:
            with open(path, "wb") as f:
                f.write(_MAGIC)
                for name in self.names():
                    arr = np.ascontiguousarray(self.tensors[name], dtype=np.float64)
                    f.write(struct.pack("<I", arr.ndim))
                    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                    f.write(arr.tobytes())
        except OSError as e:
            raise IoFailure(str(e)) from e

    @classmethod
    def load(cls, path) -> "NetworkParams":
        try:
            blob = Path(path).read_bytes()
        except OSError as e:
            raise IoFailure(str(e)) from e
        if blob[:4] != _MAGIC:
            raise MalformedRecord(f"{path}: bad checkpoint magic")
        off = 4
        raw = []
        while off < len(blob):
            if off + 4 > len(blob):
                raise MalformedRecord(f"{path}: truncated tensor header")
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            if rank < 1 or rank > 2 or off + 4 * rank > len(blob):
                raise MalformedRecord(f"{path}: bad tensor rank {rank}")
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            count = int(np.prod(dims))
            if off + 8 * count > len(blob):
                raise MalformedRecord(f"{path}: truncated tensor payload")
            raw.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy())
            off += 8 * count
        if len(raw) != 16:
            raise MalformedRecord(f"{path}: expected 16 tensors, found {len(raw)}")
        feature_dim = raw[0].shape[0]
        num_classes = raw[6].shape[1]
        params = cls({})
        expected = _layer_specs(feature_dim, num_classes)
        tensors = {}
        for (name, fan_in, fan_out), w, b in zip(expected, raw[0::2], raw[1::2]):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise MalformedRecord(f"{path}: inconsistent shapes for layer {name}")
            tensors[f"{name}_w"] = w
            tensors[f"{name}_b"] = b
        params.tensors = tensors
        return params


#: Fixed per-feature input scaling applied ahead of the backbone. The last
#: column (local density) is log-compressed; the rest are divided by typical
#: scene extents so activations start well-conditioned.
_FEATURE_SCALE = np.array([25.0, 8.0, 2.0, 25.0, 2.0, 1.0, 1.0, 1.0, 1.0])


def normalize_features(features) -> np.ndarray:
    """Condition raw 9-dim geometric features for the network input."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 9:
        raise ShapeMismatch(f"expected N x 9 features, got {features.shape}")
    out = features / _FEATURE_SCALE
    out[:, 8] = np.log1p(features[:, 8]) / 1.5
    return out


def make_leaves(params: NetworkParams) -> dict:
    return {name: ad.Tensor(params.tensors[name]) for name in params.names()}


def _dense(leaves, name, x):
    return ad.add(ad.matmul(x, leaves[f"{name}_w"]), leaves[f"{name}_b"])


def forward_graph(leaves, features):
    """Build the classification graph; returns (probs, z, logits) tensors."""
    x = ad.Tensor(features)
    h = ad.relu(_dense(leaves, "backbone1", x))
    h = ad.relu(_dense(leaves, "backbone2", h))
    z = _dense(leaves, "embed", h)
    logits = _dense(leaves, "classifier", z)
    return ad.softmax_rows(logits), z, logits


def heads_graph(leaves, z):
    """Encoder/predictor heads on embeddings; returns (encoded, predicted)."""
    e = _dense(leaves, "enc2", ad.relu(_dense(leaves, "enc1", z)))
    q = _dense(leaves, "pred2", ad.relu(_dense(leaves, "pred1", e)))
    return e, q


def forward(params: NetworkParams, features):
    """Pointwise forward pass; returns (ProbabilityField, z, logits)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feature_dim:
        raise ShapeMismatch(
            f"expected N x {params.feature_dim} features, got {features.shape}")
    probs_t, z_t, logits_t = forward_graph(make_leaves(params), features)
    return ProbabilityField(np.clip(probs_t.value, 0.0, 1.0)), z_t.value, logits_t.value


def heads(params: NetworkParams, z):
    """Numpy evaluation of the encoder/predictor heads."""
    e_t, q_t = heads_graph(make_leaves(params), ad.Tensor(z))
    return e_t.value, q_t.value


def smooth_targets(targets: LabelField, s: ConfidenceField, beta_hat: float, num_classes: int):
    """Adaptive label smoothing: beta_i = beta_hat * (1 - S_i).

    Returns (smoothed N x C rows, supervised mask). Rows sum to 1 exactly;
    IGNORE rows are zeroed and masked out.
    """
    labels = targets.values
    mask = labels != IGNORE
    beta = beta_hat * (1.0 - s.values)
    out = np.zeros((len(labels), num_classes))
    sup = np.nonzero(mask)[0]
    out[sup] = (beta[sup] / num_classes)[:, None]
    out[sup, labels[sup]] += 1.0 - beta[sup]
    return out, mask


def soft_dice_loss(probs: ProbabilityField, targets: LabelField, s: ConfidenceField,
                   beta_hat: float = 0.3):
    """Per-point soft Dice against adaptively smoothed targets.

    Both the softmax row and the smoothed target sum to 1, so the per-point
    loss reduces to 1 - <p, t>. Returns (mean loss over supervised points,
    gradient w.r.t. the logits); IGNORE points contribute nothing.
    """
    p = probs.values
    n, c = p.shape
    if len(targets) != n or len(s) != n:
        raise ShapeMismatch("targets/confidences must match the probability field")
    t, mask = smooth_targets(targets, s, beta_hat, c)
    m = int(mask.sum())
    grad = np.zeros((n, c))
    if m == 0:
        return 0.0, grad
    dots = np.einsum("nc,nc->n", p, t)
    loss = float(np.mean(1.0 - dots[mask]))
    # d(mean(1 - p.t))/dp = -t/m on supervised rows, chained through softmax
    gp = np.where(mask[:, None], -t / m, 0.0)
    grad = (gp - np.einsum("nc,nc->n", gp, p)[:, None]) * p
    return loss, grad


def dice_term(leaves, features, targets: LabelField, s: ConfidenceField, beta_hat: float):
    """Graph-level soft Dice term; returns (loss tensor or None, parts)."""
    t, mask = smooth_targets(targets, s, beta_hat, leaves["classifier_w"].value.shape[1])
    m = int(mask.sum())
    probs_t, z_t, _ = forward_graph(leaves, features)
    if m == 0:
        return None, z_t
    sup = np.nonzero(mask)[0]
    dots = ad.rows_dot(ad.gather_rows(probs_t, sup), ad.Tensor(t[sup]))
    loss = ad.sub(ad.Tensor(1.0), ad.mean_all(dots))
    return loss, z_t


@dataclass
class OptimizerState:
    """Adam first/second moments per parameter plus the step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: NetworkParams) -> "OptimizerState":
        return cls(m={k: np.zeros_like(x) for k, x in params.tensors.items()},
                   v={k: np.zeros_like(x) for k, x in params.tensors.items()})


def adam_step(params: NetworkParams, grads: dict, state: OptimizerState,
              lr: float = 1e-3, wd: float = 1e-5, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              decoupled_wd: bool = True):
    """One bias-corrected Adam step; weight decay is decoupled by default."""
    state.step += 1
    t = state.step
    for name, p in params.tensors.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient shape mismatch for {name}")
        if not decoupled_wd:
            g = g + wd * p
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if decoupled_wd:
            update = update + lr * wd * p
        params.tensors[name] = p - update
    return params, state


@dataclass
class TemporalBatch:
    """Inputs for the cross-frame consistency term of the total loss."""

    features_prev: np.ndarray
    idx_t: np.ndarray
    idx_prev: np.ndarray
    s_t: np.ndarray
    s_prev: np.ndarray
    confidence_weighted: bool = True


def total_loss_and_grad(params: NetworkParams, features, targets: LabelField,
                        s: ConfidenceField, beta_hat: float = 0.3,
                        temporal: TemporalBatch | None = None,
                        dice_on: bool = True):
    """L_final = L_dice + L_reg with reverse-mode gradients for every parameter.

    Toggled-off terms contribute exactly zero. Returns (loss, grads dict,
    (dice value, regularization value)).
    """
    from . import temporal as temporal_mod  # deferred: temporal imports this module

    leaves = make_leaves(params)
    terms = []
    dice_value = 0.0
    reg_value = 0.0

    if dice_on:
        loss_t, z_t = dice_term(leaves, features, targets, s, beta_hat)
        if loss_t is not None:
            terms.append(loss_t)
            dice_value = float(loss_t.value)
    else:
        _, z_t, _ = forward_graph(leaves, features)

    if temporal is not None and len(temporal.idx_t):
        reg_t = temporal_mod.temporal_term(leaves, z_t, temporal)
        if reg_t is not None:
            terms.append(reg_t)
            reg_value = float(reg_t.value)

    grads = {name: np.zeros_like(arr) for name, arr in params.tensors.items()}
    if not terms:
        return 0.0, grads, (0.0, 0.0)
    total = terms[0]
    for extra in terms[1:]:
        total = ad.add(total, extra)
    ad.backward(total)
    for name in grads:
        if leaves[name].grad is not None:
            grads[name] = leaves[name].grad
    return float(total.value), grads, (dice_value, reg_value)


_HEAD_NAMES = ("enc1_w", "enc1_b", "enc2_w", "enc2_b",
               "pred1_w", "pred1_b", "pred2_w", "pred2_b")
_WARMUP_JITTER = 0.05


def pretrain_source(sequences, epochs: int, seed: int, feature_fn,
                    num_classes: int, lr: float = 1e-3, wd: float = 1e-5,
                    beta_hat: float = 0.3, head_epochs: int = 2,
                    window: int = 5, tau: float = 0.2):
    """Fit the source model on labeled sequences with the soft Dice loss.

    `sequences` is a list of frame lists carrying ground truth; `feature_fn`
    maps a frame to the (already normalized) network input. Shuffling is
    fixed by `seed`, so the result is deterministic. Returns (params,
    per-epoch mean losses).

    The encoder/predictor heads receive no gradient from the Dice loss, so
    a short warm-up follows: with the backbone and classifier frozen, the
    heads alone are trained on the cross-frame consistency term over pairs
    of source frames `window` apart. Skipped when head_epochs is 0 or no
    sequence is long enough to form a pair.
    """
    frames = [f for seq in sequences for f in seq]
    if not frames:
        raise NoGroundTruth("no frames to pretrain on")
    for f in frames:
        if f.gt_labels is None:
            raise NoGroundTruth(f"frame {f.frame_id} carries no ground truth")

    cache = [feature_fn(f) for f in frames]
    params = NetworkParams.init(cache[0].shape[1], num_classes, seed=seed)
    state = OptimizerState.init(params)
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(frames))
        losses = []
        for i in order:
            frame = frames[i]
            labels = LabelField(frame.gt_labels)
            ones = ConfidenceField(np.ones(frame.num_points))
            loss, grads, _ = total_loss_and_grad(params, cache[i], labels, ones, beta_hat)
            params, state = adam_step(params, grads, state, lr=lr, wd=wd)
            losses.append(loss)
        history.append(float(np.mean(losses)))

    if head_epochs > 0 and epochs > 0:
        from . import spatial  # deferred: only needed for the warm-up pairs
        from .core import Frame

        def jittered(frame, rng, keep_frac):
            # sensor-noise + sparsity augmentation so the heads meet
            # realistic frame-to-frame discrepancies before they steer
            # the shared trunk at adaptation time
            noisy = frame.points + rng.normal(0.0, _WARMUP_JITTER,
                                              frame.points.shape)
            gt = frame.gt_labels
            if keep_frac < 1.0:
                keep = rng.uniform(size=len(noisy)) < keep_frac
                if keep.sum() < 32:
                    keep[:] = True
                noisy = noisy[keep]
                gt = None if gt is None else gt[keep]
            return Frame(frame.frame_id, noisy, frame.pose, gt)

        rng = np.random.default_rng([seed, 0xA11])
        head_state = OptimizerState.init(params)
        for epoch in range(head_epochs):
            for seq in sequences:
                keep_frac = (1.0, 0.5, 0.7)[epoch % 3]
                views = [jittered(f, rng, keep_frac) for f in seq]
                feats = [feature_fn(f) for f in views]
                for t in range(window, len(seq)):
                    frame_t, frame_prev = views[t], views[t - window]
                    pairs = spatial.match_correspondences(frame_t, frame_prev, tau)
                    if not len(pairs.idx_t):
                        continue
                    batch = TemporalBatch(
                        features_prev=feats[t - window],
                        idx_t=pairs.idx_t, idx_prev=pairs.idx_prev,
                        s_t=np.ones(frame_t.num_points),
                        s_prev=np.ones(frame_prev.num_points))
                    _, grads, _ = total_loss_and_grad(
                        params, feats[t], LabelField(frame_t.gt_labels),
                        ConfidenceField(np.ones(frame_t.num_points)),
                        beta_hat, temporal=batch, dice_on=False)
                    for name in grads:
                        if name not in _HEAD_NAMES:
                            grads[name][...] = 0.0
                    params, head_state = adam_step(params, grads, head_state,
                                                   lr=lr, wd=0.0)
    return params, history
