"""Layered discriminative loss over the two embedding maps, with exact
analytic gradients.

Three terms act on per-instance mean embeddings computed jointly over the
foreground and occlusion layers:

  * variance: squared hinge on the L1 distance of each instance pixel to its
    instance mean, beyond a margin d_var; averaged per instance, then over
    instances.
  * distance: squared hinge pushing within-class instance means at least
    2*d_dst apart in L1; summed over ordered same-class pairs, scaled by
    1/(N_k (N_k - 1)) per class. Cross-class pairs are never penalized.
  * regularization: mean L1 norm of the instance means.

Auxiliary supervision: per-pixel softmax cross-entropy on both semantic
heads (averaged over pixels, summed over heads).

Subgradient conventions (relevant to finite-difference checks): the hinge at
exactly zero takes the zero branch, and the L1 sign at zero is zero.
All reductions run in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    d_var: float = 0.5
    d_dst: float = 1.5
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    semantic_weight: float = 1.0

    def __post_init__(self):
        if self.d_var <= 0:
            raise ValueError("d_var must be positive")
        if self.d_dst <= self.d_var:
            raise ValueError("d_dst must exceed d_var")
        if min(self.alpha, self.beta, self.gamma, self.semantic_weight) < 0:
            raise ValueError("weights must be nonnegative")


@dataclass(frozen=True)
class InstanceRegion:
    instance_id: int
    class_id: int
    fg_pixels: np.ndarray   # (Mf, 2) int (row, col) indices into the fg map
    occ_pixels: np.ndarray  # (Mo, 2) int indices into the occlusion map

    @property
    def size(self) -> int:
        return len(self.fg_pixels) + len(self.occ_pixels)


@dataclass(frozen=True)
class InstanceRegions:
    regions: tuple[InstanceRegion, ...]

    def __len__(self) -> int:
        return len(self.regions)

    def class_ids(self) -> np.ndarray:
        return np.array([r.class_id for r in self.regions], dtype=np.int64)

    @classmethod
    def from_label_maps(cls, fg_instance, occ_instance, fg_class, occ_class) -> "InstanceRegions":
        """Build regions from the two instance maps; class ids are read off
        the matching class maps."""
        fg_instance = np.asarray(fg_instance)
        occ_instance = np.asarray(occ_instance)
        ids = np.union1d(np.unique(fg_instance), np.unique(occ_instance))
        ids = ids[ids > 0]
        regions = []
        for v in ids:
            fg_idx = np.argwhere(fg_instance == v)
            occ_idx = np.argwhere(occ_instance == v)
            if len(fg_idx):
                r, c = fg_idx[0]
                class_id = int(fg_class[r, c]) - 1
            else:
                r, c = occ_idx[0]
                class_id = int(occ_class[r, c]) - 1
            regions.append(InstanceRegion(
                instance_id=int(v) - 1, class_id=class_id,
                fg_pixels=fg_idx, occ_pixels=occ_idx,
            ))
        return cls(regions=tuple(regions))


@dataclass
class LossBreakdown:
    l_var: float
    l_dst: float
    l_reg: float
    l_semantic: float
    total: float
    means: np.ndarray  # (N, C)


@dataclass
class LossGradients:
    d_fg: np.ndarray
    d_occ: np.ndarray
    d_fg_logits: np.ndarray
    d_occ_logits: np.ndarray


def _gather(embed: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    if len(pixels) == 0:
        return np.zeros((0, embed.shape[-1]), dtype=np.float64)
    return embed[pixels[:, 0], pixels[:, 1]].astype(np.float64)


def instance_means(fg: np.ndarray, occ: np.ndarray, regions: InstanceRegions) -> np.ndarray:
    """Mean embedding per instance over its pixels in both layers, (N, C)."""
    means = np.zeros((len(regions), fg.shape[-1]), dtype=np.float64)
    for i, reg in enumerate(regions.regions):
        if reg.size == 0:
            raise LossInputError(f"instance {reg.instance_id} has no pixels in either layer")
        total = _gather(fg, reg.fg_pixels).sum(axis=0) + _gather(occ, reg.occ_pixels).sum(axis=0)
        means[i] = total / reg.size
    return means


def variance_loss(fg, occ, regions: InstanceRegions, means: np.ndarray,
                  config: LossConfig) -> float:
    total = 0.0
    for i, reg in enumerate(regions.regions):
        acc = 0.0
        for vals in (_gather(fg, reg.fg_pixels), _gather(occ, reg.occ_pixels)):
            if len(vals) == 0:
                continue
            dist = np.abs(means[i] - vals).sum(axis=1)
            hinge = np.maximum(dist - config.d_var, 0.0)
            acc += float((hinge ** 2).sum())
        total += acc / reg.size
    return total / len(regions)


def distance_loss(means: np.ndarray, class_ids: np.ndarray, config: LossConfig) -> float:
    total = 0.0
    for k in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == k)
        nk = len(idx)
        if nk < 2:
            continue
        sub = means[idx]
        diff = np.abs(sub[:, None, :] - sub[None, :, :]).sum(axis=2)
        hinge = np.maximum(2.0 * config.d_dst - diff, 0.0)
        np.fill_diagonal(hinge, 0.0)
        total += float((hinge ** 2).sum()) / (nk * (nk - 1))
    return total


def regularization_loss(means: np.ndarray) -> float:
    if len(means) == 0:
        raise LossInputError("regularization needs at least one instance")
    return float(np.abs(means).sum(axis=1).mean())


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def semantic_loss(fg_logits, occ_logits, fg_target, occ_target) -> float:
    """Mean per-pixel cross-entropy, summed over the two heads."""
    total = 0.0
    for logits, target in ((fg_logits, fg_target), (occ_logits, occ_target)):
        p = _softmax(logits)
        tgt = np.asarray(target, dtype=np.int64)
        picked = np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0]
        total += float(-np.log(np.maximum(picked, 1e-300)).mean())
    return total


def total_loss(fg, occ, fg_logits, occ_logits, regions: InstanceRegions,
               gt_semantics, config: LossConfig) -> LossBreakdown:
    """Weighted combination of the three embedding terms plus the semantic
    cross-entropy. ``gt_semantics`` is the (fg_class, occ_class) pair."""
    means = instance_means(fg, occ, regions)
    l_var = variance_loss(fg, occ, regions, means, config)
    l_dst = distance_loss(means, regions.class_ids(), config)
    l_reg = regularization_loss(means)
    l_sem = semantic_loss(fg_logits, occ_logits, gt_semantics[0], gt_semantics[1])
    total = (config.alpha * l_var + config.beta * l_dst
             + config.gamma * l_reg + config.semantic_weight * l_sem)
    return LossBreakdown(l_var=l_var, l_dst=l_dst, l_reg=l_reg,
                         l_semantic=l_sem, total=total, means=means)


def _sign(x: np.ndarray) -> np.ndarray:
    return np.sign(x)  # sign(0) == 0, the documented subgradient choice


def loss_with_gradient(fg, occ, fg_logits, occ_logits, regions: InstanceRegions,
                       gt_semantics, config: LossConfig):
    """Compute the breakdown and exact (sub)gradients w.r.t. all four heads.

    Gradients flow both directly into each pixel and through the instance
    means into every contributing pixel of both layers.
    """
    n = len(regions)
    means = instance_means(fg, occ, regions)
    class_ids = regions.class_ids()

    d_fg = np.zeros_like(fg, dtype=np.float64)
    d_occ = np.zeros_like(occ, dtype=np.float64)
    d_means = np.zeros_like(means)

    # variance term: direct pixel part plus accumulation into d_means
    l_var = 0.0
    for i, reg in enumerate(regions.regions):
        acc = 0.0
        scale = config.alpha / (n * reg.size)
        for pixels, embed, grad in ((reg.fg_pixels, fg, d_fg),
                                    (reg.occ_pixels, occ, d_occ)):
            vals = _gather(embed, pixels)
            if len(vals) == 0:
                continue
            delta = means[i] - vals                      # (M, C)
            dist = np.abs(delta).sum(axis=1)
            hinge = np.maximum(dist - config.d_var, 0.0)
            acc += float((hinge ** 2).sum())
            s = _sign(delta)
            coeff = 2.0 * scale * hinge                  # (M,)
            grad[pixels[:, 0], pixels[:, 1]] += -coeff[:, None] * s
            d_means[i] += (coeff[:, None] * s).sum(axis=0)
        l_var += acc / reg.size
    l_var /= n

    # distance term (ordered same-class pairs; loop unordered, double)
    l_dst = 0.0
    for k in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == k)
        nk = len(idx)
        if nk < 2:
            continue
        w = config.beta / (nk * (nk - 1))
        for a in range(nk):
            for b in range(a + 1, nk):
                i, j = idx[a], idx[b]
                delta = means[i] - means[j]
                dist = float(np.abs(delta).sum())
                arg = 2.0 * config.d_dst - dist
                if arg <= 0.0:
                    continue
                l_dst += 2.0 * arg * arg / (nk * (nk - 1))
                g = 4.0 * w * arg * _sign(delta)         # both ordered pairs
                d_means[i] -= g
                d_means[j] += g

    # regularization term
    l_reg = float(np.abs(means).sum(axis=1).mean())
    d_means += config.gamma * _sign(means) / n

    # chain the mean gradients back into the contributing pixels
    for i, reg in enumerate(regions.regions):
        g = d_means[i] / reg.size
        if len(reg.fg_pixels):
            d_fg[reg.fg_pixels[:, 0], reg.fg_pixels[:, 1]] += g
        if len(reg.occ_pixels):
            d_occ[reg.occ_pixels[:, 0], reg.occ_pixels[:, 1]] += g

    # semantic heads
    l_sem = 0.0
    sem_grads = []
    for logits, target in ((fg_logits, gt_semantics[0]), (occ_logits, gt_semantics[1])):
        p = _softmax(logits)
        tgt = np.asarray(target, dtype=np.int64)
        picked = np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0]
        l_sem += float(-np.log(np.maximum(picked, 1e-300)).mean())
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        npix = tgt.size
        sem_grads.append(config.semantic_weight * (p - onehot) / npix)

    total = (config.alpha * l_var + config.beta * l_dst
             + config.gamma * l_reg + config.semantic_weight * l_sem)
    breakdown = LossBreakdown(l_var=l_var, l_dst=l_dst, l_reg=l_reg,
                              l_semantic=l_sem, total=total, means=means)
    grads = LossGradients(d_fg=d_fg, d_occ=d_occ,
                          d_fg_logits=sem_grads[0], d_occ_logits=sem_grads[1])
    return breakdown, grads


def loss_gradient(fg, occ, fg_logits, occ_logits, regions: InstanceRegions,
                  gt_semantics, config: LossConfig) -> LossGradients:
    _, grads = loss_with_gradient(fg, occ, fg_logits, occ_logits, regions,
                                  gt_semantics, config)
    return grads
