"""Adam training with subject-wise validation, early stopping and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as mdl
from . import numeric as nm
from .data import Dataset
from .errors import ConfigurationError, InputError, NumericError, ValidationError
from .graph import AUGraph, PriorEdgeList, build_graph, graph_from_json, graph_to_json
from .numeric import ParamRegistry, Tape
from .objective import (ClassBalance, MetricReport, balanced_loss, bce_loss, compute_balance,
                        metric_report)

logger = logging.getLogger(__name__)

LOSSES = ("balanced", "bce")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    model_variant: str = mdl.SRERL
    T: int = 3
    D: int = 64
    branch_channels: int = 16
    p_pos: float = 0.2
    p_neg: float = -0.03
    lrn_k: float = 2.0
    lrn_alpha: float = 0.002
    lrn_beta: float = 0.75
    lrn_n: int = 2
    loss: str = "balanced"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    test_fold: int = 0
    graph_source: str = "fold_train"
    priors: dict | None = None
    freeze: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.model_variant not in mdl.VARIANTS:
            raise ConfigurationError(f"model_variant must be one of {mdl.VARIANTS}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"loss must be one of {LOSSES}")
        if self.graph_source not in ("fold_train", "all"):
            raise ConfigurationError("graph_source must be 'fold_train' or 'all'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in [0, 1)")

    def model_config(self, num_aus: int, in_channels: int) -> mdl.ModelConfig:
        return mdl.ModelConfig(num_aus=num_aus, in_channels=in_channels,
                               branch_channels=self.branch_channels, dim=self.D, T=self.T,
                               variant=self.model_variant, lrn_k=self.lrn_k,
                               lrn_alpha=self.lrn_alpha, lrn_beta=self.lrn_beta,
                               lrn_n=self.lrn_n, seed=self.seed)

    def to_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_obj(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ParamRegistry, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              frozen: tuple[str, ...] = ()) -> AdamState:
    """One bias-corrected Adam update, in registry order."""
    for name in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if frozen and name.startswith(frozen):
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1: float
    val_auc: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    batch_orders: list[list[int]] = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_f1", "val_auc"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_f1), repr(e.val_auc)])
        return buf.getvalue()


@dataclass
class Checkpoint:
    config: TrainConfig
    au_ids: list[int]
    in_channels: int
    params: dict[str, np.ndarray]
    graph: AUGraph | None
    balance: ClassBalance
    centers: np.ndarray

    def registry(self) -> ParamRegistry:
        reg = mdl.build_params(self.model_config())
        reg.load_state(self.params)
        return reg

    def model_config(self) -> mdl.ModelConfig:
        return self.config.model_config(len(self.au_ids), self.in_channels)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.rga").write_bytes(nm.archive_to_bytes(self.params))
        side = {"config": self.config.to_obj(), "au_ids": self.au_ids,
                "in_channels": self.in_channels, "r_pos": self.balance.r_pos.tolist(),
                "centers": self.centers.tolist(),
                "graph": json.loads(graph_to_json(self.graph)) if self.graph else None}
        (out / "config.json").write_text(json.dumps(side, indent=1) + "\n")

    @classmethod
    def load(cls, out_dir) -> "Checkpoint":
        out = Path(out_dir)
        side = json.loads((out / "config.json").read_text())
        params = nm.archive_from_bytes((out / "params.rga").read_bytes())
        graph = graph_from_json(json.dumps(side["graph"])) if side["graph"] else None
        return cls(TrainConfig.from_obj(side["config"]), side["au_ids"], side["in_channels"],
                   dict(params), graph, ClassBalance(np.array(side["r_pos"])),
                   np.array(side["centers"], dtype=int))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: History
    val_indices: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray


def split_fold(ds: Dataset, cfg: TrainConfig):
    """(train, validation, test) sample indices; validation holds out whole subjects."""
    test_idx = ds.fold_indices(cfg.test_fold)
    train_subjects = sorted({s for s, f in ds.folds.items() if f != cfg.test_fold}
                            & set(ds.subjects))
    if not train_subjects:
        raise InputError(f"no training subjects outside fold {cfg.test_fold}")
    n_val = 0
    if cfg.val_fraction > 0 and len(train_subjects) > 1:
        n_val = max(1, int(round(cfg.val_fraction * len(train_subjects))))
    rng = np.random.default_rng([cfg.seed, 1])
    val_subjects = set(rng.choice(train_subjects, size=n_val, replace=False)) if n_val else set()
    train_idx = ds.subject_indices(set(train_subjects) - val_subjects)
    val_idx = ds.subject_indices(val_subjects) if val_subjects else train_idx
    if train_idx.size == 0:
        raise InputError("empty training set")
    return train_idx, val_idx, test_idx


def _graph_for(ds: Dataset, idx: np.ndarray, cfg: TrainConfig) -> AUGraph:
    labels = ds.labels if cfg.graph_source == "all" else ds.labels.subset(idx)
    priors = PriorEdgeList.from_obj(cfg.priors) if cfg.priors else None
    return build_graph(labels, cfg.p_pos, cfg.p_neg, priors)


def predict(params: ParamRegistry, mcfg: mdl.ModelConfig, ds: Dataset, idx: np.ndarray,
            centers: np.ndarray, adjacency, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, idx.size, batch_size):
        b = idx[start:start + batch_size]
        out.append(mdl.forward(params, mcfg, ds.features[b], centers, adjacency).probs.data)
    return np.concatenate(out) if out else np.zeros((0, mcfg.num_aus))


def _loss(probs, labels, cfg: TrainConfig, balance: ClassBalance):
    if cfg.loss == "balanced":
        return balanced_loss(probs, labels, balance)
    return bce_loss(probs, labels)


def _score(probs, labels, au_ids) -> tuple[float, float]:
    rep = metric_report(probs, labels, au_ids)
    macro = rep.macro
    return macro["f1"], (macro["auc"] if macro["auc"] is not None else float("nan"))


def train(ds: Dataset, cfg: TrainConfig, init: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train one fold.  ``init`` overrides initial values of same-named, same-shaped parameters."""
    train_idx, val_idx, test_idx = split_fold(ds, cfg)
    au_ids = list(ds.labels.au_ids)
    in_channels = ds.features.shape[1]
    mcfg = cfg.model_config(len(au_ids), in_channels)
    graph = _graph_for(ds, train_idx, cfg) if cfg.model_variant == mdl.SRERL else None
    adjacency = graph.A if graph is not None else None
    balance = compute_balance(ds.labels.subset(train_idx))
    centers = ds.regions.grid_centers()
    params = mdl.build_params(mcfg)
    if init:
        for name, value in init.items():
            if name in params and params[name].shape == np.shape(value):
                params[name].data[...] = value
            else:
                logger.warning("init: skipping %s (absent or shape mismatch)", name)
    state = AdamState()
    rng = np.random.default_rng([cfg.seed, 2])
    frozen = tuple(cfg.freeze)
    labels = ds.labels.rows.astype(np.float64)

    history = History()
    best_f1 = -math.inf
    best_state = params.state()
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx.size)
        history.batch_orders.append(order.tolist())
        total, count = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            b = train_idx[order[start:start + cfg.batch_size]]
            params.zero_grad()
            with Tape() as tape:
                out = mdl.forward(params, mcfg, ds.features[b], centers, adjacency)
                loss = _loss(out.probs, labels[b], cfg, balance)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            adam_step(params, params.grads(), state, cfg.learning_rate, cfg.adam_beta1,
                      cfg.adam_beta2, cfg.adam_eps, frozen)
            total += value * b.size
            count += b.size
        val_probs = predict(params, mcfg, ds, val_idx, centers, adjacency)
        val_f1, val_auc = _score(val_probs, labels[val_idx], au_ids)
        history.epochs.append(EpochRecord(epoch, total / count, val_f1, val_auc))
        logger.info("epoch %d loss %.5f val_f1 %.4f val_auc %.4f", epoch, total / count,
                    val_f1, val_auc)
        if val_f1 > best_f1:
            best_f1, best_state, since_best = val_f1, params.state(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    ckpt = Checkpoint(cfg, au_ids, in_channels, best_state, graph, balance, centers)
    return TrainResult(ckpt, history, val_idx, train_idx, test_idx)


def evaluate(ckpt: Checkpoint, ds: Dataset, fold: int | None = None,
             indices: np.ndarray | None = None) -> MetricReport:
    """Metrics of the checkpoint on one fold (default: its test fold) or explicit indices."""
    if list(ckpt.au_ids) != list(ds.labels.au_ids):
        raise ValidationError(f"checkpoint AUs {ckpt.au_ids} != dataset AUs {ds.labels.au_ids}")
    if indices is None:
        indices = ds.fold_indices(ckpt.config.test_fold if fold is None else fold)
    mcfg = ckpt.model_config()
    params = ckpt.registry()
    adjacency = ckpt.graph.A if ckpt.graph is not None else None
    probs = predict(params, mcfg, ds, indices, ckpt.centers, adjacency)
    return metric_report(probs, ds.labels.rows[indices], ckpt.au_ids)
