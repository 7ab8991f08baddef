"""Multiscale feature normalization, landmark cropping and per-region branches.

Feature maps live on a 14×14 grid that corresponds to a 224×224 face image
(stride 16).  Each AU owns two regions (left and right face side); region
``2v`` is the left one of node ``v`` and ``2v + 1`` the right one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .errors import DimensionError, ParseError, ValidationError
from .numeric import ParamRegistry, Tensor

GRID = 14
INPUT_SIZE = 224
CROP = 6

LRN_K = 2.0
LRN_ALPHA = 0.002
LRN_BETA = 0.75
LRN_N = 2


@dataclass
class FeatureStack:
    """One tensor per scale group, each C_g×14×14 (or N×C_g×14×14)."""

    maps: list[np.ndarray]
    grid: tuple[int, int] = (GRID, GRID)
    input_space: tuple[int, int] = (INPUT_SIZE, INPUT_SIZE)

    def __post_init__(self):
        if not self.maps:
            raise ValidationError("feature stack needs at least one map")
        for k, m in enumerate(self.maps):
            if m.shape[-2:] != tuple(self.grid):
                raise DimensionError(f"map {k} has grid {m.shape[-2:]}, expected {self.grid}")

    @property
    def channels(self) -> int:
        return sum(m.shape[-3] for m in self.maps)


def _window_sum(sq: np.ndarray, half: int) -> np.ndarray:
    """Sum over channels c-half..c+half (clipped) along axis -3."""
    c = sq.shape[-3]
    out = sq.copy()
    for d in range(1, half + 1):
        if d >= c:
            break
        out[..., d:, :, :] += sq[..., :-d, :, :]
        out[..., :-d, :, :] += sq[..., d:, :, :]
    return out


def lrn(x: Tensor, k: float = LRN_K, alpha: float = LRN_ALPHA, beta: float = LRN_BETA,
        n: int = LRN_N) -> Tensor:
    """Cross-channel local response normalization over axis -3.

    b_c = a_c / (k + alpha * C / n * sum_{|c'-c| <= n//2} a_c'^2) ** beta
    """
    if n < 1 or k <= 0:
        raise ValidationError(f"lrn needs n >= 1 and k > 0, got n={n}, k={k}")
    a = x.data
    c = a.shape[-3]
    gamma = alpha * c / n
    half = n // 2
    s = k + gamma * _window_sum(a * a, half)
    inv = s ** (-beta)
    y = a * inv

    def backward(g):
        t = g * a * inv / s
        return (g * inv - 2.0 * beta * gamma * a * _window_sum(t, half),)

    return nm.record(y, (x,), backward)


def concat_and_lrn(maps: Sequence[Tensor], k: float = LRN_K, alpha: float = LRN_ALPHA,
                   beta: float = LRN_BETA, n: int = LRN_N) -> Tensor:
    grids = {m.shape[-2:] for m in maps}
    if len(grids) != 1:
        raise DimensionError(f"feature maps disagree on grid: {sorted(grids)}")
    stacked = maps[0] if len(maps) == 1 else nm.concat(list(maps), axis=-3)
    return lrn(stacked, k, alpha, beta, n)


def landmark_to_grid(pt: Sequence[float], input_size: int = INPUT_SIZE,
                     grid: int = GRID) -> tuple[int, int]:
    """Map an (x, y) pixel to its (row, col) cell, clamped to the grid."""
    stride = input_size / grid
    x, y = pt
    row = min(max(int(np.floor(y / stride)), 0), grid - 1)
    col = min(max(int(np.floor(x / stride)), 0), grid - 1)
    return row, col


def crop_origin(center: Sequence[int], size: int = CROP, grid: int = GRID) -> tuple[int, int]:
    if size > grid:
        raise ValidationError(f"crop size {size} exceeds grid {grid}")
    row, col = center
    half = size // 2
    return (min(max(row - half, 0), grid - size), min(max(col - half, 0), grid - size))


def crop_region(feat: Tensor, center, size: int = CROP) -> Tensor:
    """Crop a size×size window around ``center`` from C×H×W or N×C×H×W maps.

    ``center`` is one (row, col) pair, or an N×2 array of per-sample centers
    for batched input.
    """
    grid = feat.shape[-1]
    if feat.shape[-2] != grid:
        raise DimensionError(f"crop_region expects a square grid, got {feat.shape}")
    centers = np.asarray(center, dtype=int)
    a = feat.data
    if centers.ndim == 1:
        r0, c0 = crop_origin(centers, size, grid)
        y = a[..., r0:r0 + size, c0:c0 + size].copy()

        def backward(g):
            dx = np.zeros_like(a)
            dx[..., r0:r0 + size, c0:c0 + size] = g
            return (dx,)

        return nm.record(y, (feat,), backward)

    if a.ndim != 4 or centers.shape != (a.shape[0], 2):
        raise DimensionError(f"per-sample centers {centers.shape} do not fit batch {a.shape}")
    origins = [crop_origin(cn, size, grid) for cn in centers]
    y = np.stack([a[i, :, r:r + size, c:c + size] for i, (r, c) in enumerate(origins)])

    def backward(g):
        dx = np.zeros_like(a)
        for i, (r, c) in enumerate(origins):
            dx[i, :, r:r + size, c:c + size] = g[i]
        return (dx,)

    return nm.record(y, (feat,), backward)


# ---------------------------------------------------------------------------
# Region layout
# ---------------------------------------------------------------------------

@dataclass
class RegionEntry:
    au: int
    left: tuple[float, float]
    right: tuple[float, float]


@dataclass
class RegionSpec:
    entries: list[RegionEntry]
    crop_size: int = CROP
    input_size: int = INPUT_SIZE
    note: str = ""

    def __post_init__(self):
        for e in self.entries:
            for side in (e.left, e.right):
                if len(side) != 2 or not all(0 <= v < self.input_size for v in side):
                    raise ValidationError(
                        f"AU{e.au}: landmark {side} outside [0, {self.input_size})")
        ids = [e.au for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate AU in region spec: {ids}")

    @property
    def au_ids(self) -> list[int]:
        return [e.au for e in self.entries]

    def for_aus(self, au_ids: Sequence[int]) -> "RegionSpec":
        """Entries reordered to match ``au_ids``."""
        by_id = {e.au: e for e in self.entries}
        missing = [a for a in au_ids if a not in by_id]
        if missing:
            raise ValidationError(f"no region landmarks for AUs {missing}")
        return RegionSpec([by_id[a] for a in au_ids], self.crop_size, self.input_size, self.note)

    def grid_centers(self, grid: int = GRID) -> np.ndarray:
        """(2C)×2 array of (row, col): left then right for each AU in order."""
        cells = []
        for e in self.entries:
            cells.append(landmark_to_grid(e.left, self.input_size, grid))
            cells.append(landmark_to_grid(e.right, self.input_size, grid))
        return np.array(cells, dtype=int)

    def to_json(self) -> str:
        obj = [{"au": e.au, "left": list(e.left), "right": list(e.right)} for e in self.entries]
        return json.dumps(obj, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RegionSpec":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
        note = ""
        if isinstance(obj, dict):
            note = obj.get("note", "")
            obj = obj.get("regions")
        if not isinstance(obj, list):
            raise ParseError("expected a list of {au, left, right}", "$")
        entries = []
        for k, item in enumerate(obj):
            try:
                entries.append(RegionEntry(int(item["au"]), tuple(map(float, item["left"])),
                                           tuple(map(float, item["right"]))))
            except (KeyError, TypeError, ValueError):
                raise ParseError("expected {au, left: [x, y], right: [x, y]}", f"$[{k}]") from None
        try:
            return cls(entries, note=note)
        except ValidationError as exc:
            raise ParseError(str(exc), "$") from None


def default_region_spec() -> RegionSpec:
    """Approximate BP4D/DISFA AU landmark table shipped with the package.

    The coordinates are hand-placed on a canonical 224×224 aligned face and
    only approximate the usual AU-to-landmark correspondence.
    """
    from importlib import resources

    text = resources.files("relgnn.resources").joinpath("default_regions.json").read_text()
    return RegionSpec.from_json(text)


# ---------------------------------------------------------------------------
# Region branches
# ---------------------------------------------------------------------------

def region_param_name(r: int, part: str) -> str:
    return f"region.{r:02d}.{part}"


def init_region_params(params: ParamRegistry, rng: np.random.Generator, num_regions: int,
                       in_channels: int, branch_channels: int, out_dim: int,
                       crop: int = CROP) -> None:
    flat = branch_channels * crop * crop
    for r in range(num_regions):
        params.add(region_param_name(r, "conv.weight"), Tensor(nm.glorot_uniform(
            rng, (branch_channels, in_channels, 3, 3), in_channels * 9, branch_channels * 9)))
        params.add(region_param_name(r, "conv.bias"), Tensor(np.zeros(branch_channels)))
        params.add(region_param_name(r, "fc.weight"), Tensor(nm.glorot_uniform(
            rng, (out_dim, flat), flat, out_dim)))
        params.add(region_param_name(r, "fc.bias"), Tensor(np.zeros(out_dim)))


def region_branch(crop: Tensor, params: ParamRegistry, r: int) -> Tensor:
    """FC(flatten(ReLU(conv3x3(crop)))) with region ``r``'s own parameters."""
    name = region_param_name(r, "conv.weight")
    if name not in params:
        raise DimensionError(f"no parameters for region {r}")
    h = nm.relu(nm.conv2d_3x3(crop, params[name], params[region_param_name(r, "conv.bias")]))
    lead = h.shape[:-3]
    flat = nm.reshape(h, lead + (int(np.prod(h.shape[-3:])),))
    return nm.fully_connected(flat, params[region_param_name(r, "fc.weight")],
                              params[region_param_name(r, "fc.bias")])


def fuse_symmetric(f_left: Tensor, f_right: Tensor) -> Tensor:
    """Node feature as the mean of its two region features."""
    if f_left.shape != f_right.shape:
        raise DimensionError(f"fuse_symmetric: {f_left.shape} vs {f_right.shape}")
    return nm.scale(nm.add(f_left, f_right), 0.5)
