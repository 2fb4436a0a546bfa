"""Iterative mean-shift grouping of pixel embeddings into layered instances.

Foreground-masked and occlusion-masked pixels form one joint point set in
embedding space; grouping them together is what yields instance labels that
stay consistent across the two layers. Semantics strictly gate membership:
only pixels the semantic maps mark as foreground/occluded participate.

Each round seeds at a random unlabeled point, repeatedly collects all
unlabeled points within the L1 bandwidth of the running group mean, and
recomputes the mean until the membership set reaches a fixpoint (or the
iteration cap). Groups below ``min_cluster_pixels`` are discarded and their
pixels stay unassigned. Every round labels at least one point, so the
procedure terminates.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class ClusterConfig:
    bandwidth: float = 1.5          # L1 grouping radius; matches d_dst
    max_iterations: int = 100
    min_cluster_pixels: int = 3
    seed: int = 0
    mode: str = "joint"             # "joint" or "fg_then_occ"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.mode not in ("joint", "fg_then_occ"):
            raise ValueError(f"unknown clustering mode {self.mode!r}")


@dataclass
class ClusterResult:
    fg_labels: np.ndarray   # (H, W) int32, 0 = unassigned
    occ_labels: np.ndarray  # (H, W) int32, shared label space with fg
    means: np.ndarray       # (num_clusters, C) float64, row i is label i+1


@dataclass
class InstanceDetection:
    instance_id: int
    class_id: int
    fg_mask: np.ndarray
    occ_mask: np.ndarray
    amodal_mask: np.ndarray
    score: float


def _mean_shift(points: np.ndarray, config: ClusterConfig, rng: np.random.Generator):
    """Label a point set; returns (labels (P,) int32 with 0 unassigned, means)."""
    n = len(points)
    labels = np.zeros(n, dtype=np.int32)
    raw_means = []
    unlabeled = np.ones(n, dtype=bool)
    while unlabeled.any():
        candidates = np.flatnonzero(unlabeled)
        seed_idx = candidates[rng.integers(len(candidates))]
        mean = points[seed_idx].copy()
        members = None
        for _ in range(config.max_iterations):
            dist = np.abs(points - mean).sum(axis=1)
            new_members = unlabeled & (dist <= config.bandwidth)
            if not new_members.any():
                break
            if members is not None and np.array_equal(new_members, members):
                break
            members = new_members
            mean = points[members].mean(axis=0)
        if members is None or not members.any():
            members = np.zeros(n, dtype=bool)
            members[seed_idx] = True
            mean = points[seed_idx].astype(np.float64)
        raw_means.append(points[members].mean(axis=0))
        labels[members] = len(raw_means)
        unlabeled &= ~members

    # drop undersized groups, compacting the surviving label ids
    keep = []
    counts = np.bincount(labels, minlength=len(raw_means) + 1)
    remap = np.zeros(len(raw_means) + 1, dtype=np.int32)
    for lbl in range(1, len(raw_means) + 1):
        if counts[lbl] >= config.min_cluster_pixels:
            keep.append(raw_means[lbl - 1])
            remap[lbl] = len(keep)
    labels = remap[labels]
    means = np.array(keep, dtype=np.float64) if keep else np.zeros((0, points.shape[1]))
    return labels, means


def cluster_embeddings(fg_embed, occ_embed, fg_sem_labels, occ_sem_labels,
                       config: ClusterConfig) -> ClusterResult:
    """Group semantically gated pixels of both layers into shared instance
    labels. Returns per-layer label maps (0 = unassigned) and cluster means."""
    fg_embed = np.asarray(fg_embed, dtype=np.float64)
    occ_embed = np.asarray(occ_embed, dtype=np.float64)
    h, w = fg_embed.shape[:2]
    fg_idx = np.argwhere(np.asarray(fg_sem_labels) > 0)
    occ_idx = np.argwhere(np.asarray(occ_sem_labels) > 0)
    fg_points = fg_embed[fg_idx[:, 0], fg_idx[:, 1]] if len(fg_idx) else \
        np.zeros((0, fg_embed.shape[-1]))
    occ_points = occ_embed[occ_idx[:, 0], occ_idx[:, 1]] if len(occ_idx) else \
        np.zeros((0, occ_embed.shape[-1]))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    fg_labels = np.zeros((h, w), dtype=np.int32)
    occ_labels = np.zeros((h, w), dtype=np.int32)

    if config.mode == "joint":
        points = np.concatenate([fg_points, occ_points], axis=0)
        if len(points) == 0:
            return ClusterResult(fg_labels, occ_labels,
                                 np.zeros((0, fg_embed.shape[-1])))
        labels, means = _mean_shift(points, config, rng)
        fg_part = labels[:len(fg_points)]
        occ_part = labels[len(fg_points):]
    else:  # fg_then_occ: cluster foreground, then attach occluded pixels
        if len(fg_points) == 0:
            return ClusterResult(fg_labels, occ_labels,
                                 np.zeros((0, fg_embed.shape[-1])))
        fg_part, means = _mean_shift(fg_points, config, rng)
        occ_part = np.zeros(len(occ_points), dtype=np.int32)
        if len(means) and len(occ_points):
            dist = np.abs(occ_points[:, None, :] - means[None, :, :]).sum(axis=2)
            nearest = dist.argmin(axis=1)
            within = dist[np.arange(len(occ_points)), nearest] <= config.bandwidth
            occ_part[within] = nearest[within] + 1

    if len(fg_idx):
        fg_labels[fg_idx[:, 0], fg_idx[:, 1]] = fg_part
    if len(occ_idx):
        occ_labels[occ_idx[:, 0], occ_idx[:, 1]] = occ_part
    return ClusterResult(fg_labels, occ_labels, means)


def assemble_detections(result: ClusterResult, fg_sem_labels, occ_sem_labels,
                        fg_embed, occ_embed,
                        config: ClusterConfig) -> list[InstanceDetection]:
    """One detection per cluster: class by majority vote over both layers
    (ties to the lower class index), score by embedding compactness."""
    fg_sem = np.asarray(fg_sem_labels)
    occ_sem = np.asarray(occ_sem_labels)
    fg_embed = np.asarray(fg_embed, dtype=np.float64)
    occ_embed = np.asarray(occ_embed, dtype=np.float64)
    detections = []
    for lbl in range(1, len(result.means) + 1):
        fg_mask = result.fg_labels == lbl
        occ_mask = result.occ_labels == lbl
        votes = np.concatenate([fg_sem[fg_mask].ravel(), occ_sem[occ_mask].ravel()])
        votes = votes[votes > 0]
        if len(votes) == 0:
            continue
        class_id = int(np.bincount(votes).argmax()) - 1
        mu = result.means[lbl - 1]
        devs = np.concatenate([
            np.abs(fg_embed[fg_mask] - mu).sum(axis=1),
            np.abs(occ_embed[occ_mask] - mu).sum(axis=1),
        ])
        score = float(np.maximum(0.0, 1.0 - devs / config.bandwidth).mean())
        detections.append(InstanceDetection(
            instance_id=lbl - 1, class_id=class_id,
            fg_mask=fg_mask, occ_mask=occ_mask,
            amodal_mask=fg_mask | occ_mask, score=score,
        ))
    return detections


def detections_from_heads(outputs: dict, config: ClusterConfig) -> list[InstanceDetection]:
    """Full post-processing of one sample's four heads into detections."""
    fg_sem = np.asarray(outputs["fg_semantic"]).argmax(axis=-1)
    occ_sem = np.asarray(outputs["occ_semantic"]).argmax(axis=-1)
    result = cluster_embeddings(outputs["fg_embed"], outputs["occ_embed"],
                                fg_sem, occ_sem, config)
    return assemble_detections(result, fg_sem, occ_sem,
                               outputs["fg_embed"], outputs["occ_embed"], config)
