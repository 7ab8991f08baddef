"""End-to-end forward pass for the two model variants.

``SRERL``: LRN → crops → region branches → symmetric fusion → GGNN → head.
``MS_RL``: the same without the GGNN; the head sees the fused node features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ggnn
from . import numeric as nm
from . import regional
from .errors import ConfigurationError, DimensionError
from .numeric import ParamRegistry, Tensor

SRERL = "SRERL"
MS_RL = "MS_RL"
VARIANTS = (SRERL, MS_RL)


@dataclass
class ModelConfig:
    num_aus: int
    in_channels: int
    branch_channels: int = 16
    dim: int = 64
    T: int = 3
    variant: str = SRERL
    lrn_k: float = regional.LRN_K
    lrn_alpha: float = regional.LRN_ALPHA
    lrn_beta: float = regional.LRN_BETA
    lrn_n: int = regional.LRN_N
    crop: int = regional.CROP
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_aus < 1 or self.in_channels < 1 or self.dim < 1 or self.branch_channels < 1:
            raise ConfigurationError("model sizes must be positive")
        if self.T < 1:
            raise ConfigurationError(f"T must be >= 1, got {self.T}")


def build_params(cfg: ModelConfig) -> ParamRegistry:
    """Seeded initialization: region branches, then GGNN (SRERL only), then head."""
    rng = np.random.default_rng(cfg.seed)
    params = ParamRegistry()
    regional.init_region_params(params, rng, 2 * cfg.num_aus, cfg.in_channels,
                                cfg.branch_channels, cfg.dim, cfg.crop)
    if cfg.variant == SRERL:
        ggnn.init_params(params, rng, cfg.num_aus, cfg.dim, cfg.dim)
    ggnn.init_head(params, rng, cfg.num_aus, cfg.dim)
    return params


@dataclass
class Forward:
    probs: Tensor
    logits: Tensor
    nodes: Tensor                      # N×C×D fused node features
    regions: list[Tensor] = field(default_factory=list)
    normalized: Tensor | None = None


def node_features(params: ParamRegistry, cfg: ModelConfig, features: Tensor,
                  centers: np.ndarray) -> tuple[Tensor, list[Tensor], Tensor]:
    """Fused node features (N×C×D) plus the raw region features."""
    if features.data.ndim != 4 or features.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"expected N×{cfg.in_channels}×H×W features, got {features.shape}")
    normed = regional.lrn(features, cfg.lrn_k, cfg.lrn_alpha, cfg.lrn_beta, cfg.lrn_n)
    centers = np.asarray(centers, dtype=int)
    n_regions = 2 * cfg.num_aus
    if centers.shape[-2:] != (n_regions, 2):
        raise DimensionError(f"need {n_regions} region centers, got {centers.shape}")
    region_feats = []
    for r in range(n_regions):
        c = centers[r] if centers.ndim == 2 else centers[:, r]
        crop = regional.crop_region(normed, c, cfg.crop)
        region_feats.append(regional.region_branch(crop, params, r))
    nodes = [regional.fuse_symmetric(region_feats[2 * v], region_feats[2 * v + 1])
             for v in range(cfg.num_aus)]
    return nm.stack(nodes, axis=1), region_feats, normed


def forward(params: ParamRegistry, cfg: ModelConfig, features, centers,
            adjacency: np.ndarray | None = None) -> Forward:
    features = nm.as_tensor(features)
    x, region_feats, normed = node_features(params, cfg, features, centers)
    if cfg.variant == SRERL:
        if adjacency is None:
            raise ConfigurationError("SRERL needs an adjacency matrix")
        o = ggnn.run(x, np.asarray(adjacency, dtype=np.float64), params, cfg.T)
    else:
        o = x
    probs, logits = ggnn.predict(o, params)
    return Forward(probs, logits, x, region_feats, normed)


def gradcheck_instance(seed: int = 1, num_aus: int = 4, dim: int = 8, samples: int = 2,
                       in_channels: int = 3, branch_channels: int = 2, T: int = 3):
    """Small random SRERL problem: (params, objective) for finite-difference checking.

    The objective is the balanced loss of the full forward pass on ``samples``
    random feature stacks with a fixed signed graph.
    """
    from .graph import assemble_adjacency
    from .objective import ClassBalance, balanced_loss

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_aus=num_aus, in_channels=in_channels, branch_channels=branch_channels,
                      dim=dim, T=T, seed=seed)
    params = build_params(cfg)
    feats = rng.normal(size=(samples, in_channels, regional.GRID, regional.GRID))
    centers = rng.integers(0, regional.GRID, (2 * num_aus, 2))
    a_pos = rng.integers(0, 2, (num_aus, num_aus))
    a_neg = rng.integers(0, 2, (num_aus, num_aus)) * (1 - a_pos)
    np.fill_diagonal(a_neg, 0)
    graph = assemble_adjacency(a_pos, a_neg, list(range(1, num_aus + 1)))
    labels = rng.integers(0, 2, (samples, num_aus))
    balance = ClassBalance(rng.uniform(0.1, 0.9, num_aus))
    adjacency = graph.A.astype(np.float64)

    def objective(reg: ParamRegistry) -> Tensor:
        return balanced_loss(forward(reg, cfg, feats, centers, adjacency).probs, labels, balance)

    return params, objective


def gradcheck_suite(seed: int = 1, epsilon: float = 1e-4, tolerance: float = 1e-5,
                    **sizes) -> nm.GradCheckReport:
    params, objective = gradcheck_instance(seed, **sizes)
    return nm.finite_diff_check(objective, params, epsilon, tolerance)
