"""Ground-truth-driven predictor: ideal heads with a controllable noise knob.

Decouples clustering and evaluation from training quality. Semantic logits
are one-hot with a large margin; each instance receives a target embedding
from a deterministic centered integer lattice, shared across its foreground
and occlusion pixels, so layer consistency holds by construction.

Targets are assigned globally (not merely per class): grouping is
class-agnostic, so exact recovery needs all instances pairwise separated.
In strict mode the lattice spacing is 2*d_dst and construction fails when
the requested instance count exceeds the lattice capacity within the
coordinate budget. In relaxed mode the spacing shrinks instead, modeling the
capacity squeeze of low embedding dimensions under the norm penalty.
"""

from __future__ import annotations

import itertools

import numpy as np

from .losses import LossConfig
from .scenegen import RenderedSample

SEMANTIC_MARGIN = 10.0
_MAX_LATTICE = 2_000_000


class OracleLatticeError(RuntimeError):
    pass


def embedding_targets(n_points: int, dim: int, spacing: float,
                      max_abs_coord: float, strict: bool = True) -> np.ndarray:
    """Deterministic (n_points, dim) targets on a centered integer lattice.

    Points are ordered by L1 deviation from the lattice center (then
    lexicographically), so near-origin sites are used first. Minimum pairwise
    L1 separation equals the effective spacing.
    """
    if n_points < 1 or dim < 1:
        raise ValueError("n_points and dim must be positive")
    g = 1
    while g ** dim < n_points:
        g += 1
    if g > 1:
        half_extent = (g - 1) * spacing / 2.0
        if half_extent > max_abs_coord + 1e-12:
            if strict:
                raise OracleLatticeError(
                    f"{n_points} instances exceed the {dim}-D lattice capacity "
                    f"at spacing {spacing} within |coord| <= {max_abs_coord}"
                )
            spacing = 2.0 * max_abs_coord / (g - 1)
    if g ** dim > _MAX_LATTICE:
        raise OracleLatticeError(f"lattice of {g}^{dim} sites is too large")
    center = (g - 1) / 2.0
    sites = sorted(
        itertools.product(range(g), repeat=dim),
        key=lambda t: (sum(abs(i - center) for i in t), t),
    )[:n_points]
    return (np.array(sites, dtype=np.float64) - center) * spacing


def oracle_predict(rendered: RenderedSample, sigma: float = 0.0, seed: int = 0,
                   num_classes: int | None = None, embed_dim: int = 6,
                   loss_config: LossConfig = LossConfig(),
                   max_abs_coord: float | None = None,
                   strict_lattice: bool = True) -> dict:
    """Emit ideal four-head outputs from ground truth.

    Per-coordinate noise std is sigma / embed_dim, keeping the expected L1
    perturbation independent of the embedding dimension; sigma=0 reproduces
    the exact ground-truth structure (zero variance and distance loss).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if num_classes is None:
        num_classes = int(max(rendered.fg_class.max(), rendered.occ_class.max()))
    if max_abs_coord is None:
        max_abs_coord = 2.0 * loss_config.d_dst
    h, w = rendered.fg_instance.shape

    ids = np.union1d(np.unique(rendered.fg_instance), np.unique(rendered.occ_instance))
    ids = ids[ids > 0]
    targets = embedding_targets(max(len(ids), 1), embed_dim,
                                spacing=2.0 * loss_config.d_dst,
                                max_abs_coord=max_abs_coord,
                                strict=strict_lattice)
    # lookup from raw map value (id + 1) to target vector; 0 -> origin
    lut = np.zeros((int(ids.max()) + 1 if len(ids) else 1, embed_dim))
    for row, v in enumerate(ids):
        lut[int(v)] = targets[row]

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    outputs = {}
    for key, inst_map, class_map in (
        ("fg", rendered.fg_instance, rendered.fg_class),
        ("occ", rendered.occ_instance, rendered.occ_class),
    ):
        logits = np.zeros((h, w, num_classes + 1), dtype=np.float64)
        np.put_along_axis(logits, class_map.astype(np.int64)[..., None],
                          SEMANTIC_MARGIN, axis=-1)
        embed = lut[inst_map.astype(np.int64)]
        if sigma > 0:
            embed = embed + rng.normal(0.0, sigma / embed_dim, size=embed.shape)
        outputs[f"{key}_semantic"] = logits
        outputs[f"{key}_embed"] = embed
    return outputs
