"""Anatomy of one pseudo-labeling pass on a single frame.

Walks through the stages that turn raw source-model softmax outputs into the
supervision actually used for an online update: neighborhood aggregation,
certainty and purity scoring, per-class percentile selection, and finally
prototype agreement. At each stage the label accuracy against ground truth
is printed, so you can watch the label set shrink and clean up.
"""

import numpy as np

from streamseg import harness, local_labels, model, prototypes, stream
from streamseg.core import IGNORE, LabelField

K = 10
LAM = 70.0


def accuracy(labels, gt, mask=None):
    keep = labels.values != IGNORE
    if mask is not None:
        keep &= mask
    if not keep.any():
        return float("nan"), 0
    return float(np.mean(labels.values[keep] == gt[keep])), int(keep.sum())


def main():
    scene = stream.SceneConfig(seed=7, frames=25)
    source = stream.generate_sequence(scene, stream.ShiftConfig())
    params, _ = model.pretrain_source(
        [source], epochs=10, seed=0,
        feature_fn=lambda f: harness.frame_features(f, 20)[1],
        num_classes=7, head_epochs=0)

    shift = stream.ShiftConfig(jitter_sigma=0.05, density_factor=0.5, seed=11)
    frame = stream.generate_sequence(stream.SceneConfig(seed=7, frames=3), shift)[2]
    gt = frame.gt_labels
    index, feats = harness.frame_features(frame, 20)
    probs, z, _ = model.forward(params, feats)

    print(f"frame with {frame.num_points} points under sensor shift\n")

    raw = LabelField(np.argmax(probs.values, axis=1))
    acc, n = accuracy(raw, gt)
    print(f"raw argmax:                  {100 * acc:5.2f}% over {n} points")

    aggregated = local_labels.aggregate_predictions(probs, index, K)
    labels = local_labels.local_pseudo_labels(aggregated)
    acc, n = accuracy(labels, gt)
    print(f"after K-NN aggregation:      {100 * acc:5.2f}% over {n} points")

    certainty = local_labels.prediction_certainty(aggregated, 7)
    purity = local_labels.geometric_purity(labels, index, K, 7)
    scores = local_labels.confidence_scores(certainty, purity)
    selected = local_labels.select_per_class(labels, scores, LAM)
    acc, n = accuracy(labels, gt, selected.values)
    print(f"selected top-{100 - LAM:.0f}% per class:   {100 * acc:5.2f}% over {n} points")

    centroids, counts = prototypes.build_prototypes(z, labels, selected, 7)
    bank = prototypes.ema_update(prototypes.PrototypeBank.empty(7, z.shape[1]),
                                 centroids, counts, alpha=0.99)
    global_labels = prototypes.global_pseudo_labels(z, bank)
    fused = prototypes.fuse_local_global(labels, global_labels)
    acc, n = accuracy(fused, gt)
    print(f"prototype-agreement fusion:  {100 * acc:5.2f}% over {n} points")

    print("\nmean confidence by ground-truth class:")
    for c, name in enumerate(stream.CANONICAL_CLASSES):
        print(f"  {name:<10} {scores.values[gt == c].mean():.3f}")


if __name__ == "__main__":
    main()
