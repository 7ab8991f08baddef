"""End-to-end acceptance checks; each test records one PASS/FAIL line.

Run alone with ``pytest -m acceptance -s``; the lines are also repeated in the
terminal summary.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from relgnn import ggnn
from relgnn.data import (SyntheticConfig, Template, dataset_from_synthetic, generate_synthetic,
                         population_edge_stats)
from relgnn.graph import LabelTable, assemble_adjacency, compute_edge_stats, threshold_edges
from relgnn.model import gradcheck_suite
from relgnn.numeric import ParamRegistry, Tensor
from relgnn.objective import ClassBalance, auc, balanced_loss, f1_score
from relgnn.regional import lrn
from relgnn.trainer import TrainConfig, evaluate, train

from acceptance_log import record
from oracles import (adjacency_oracle, auc_pairs, balanced_loss_scalar, count_stats,
                     ggnn_step_scalar, lrn_scalar, threshold_oracle)

pytestmark = pytest.mark.acceptance

GATES = ["W_z", "U_z", "W_r", "U_r", "W", "U", "b"]

# three AU pairs with strong co-activation and otherwise sparse labels
PAIRS = dict(au_ids=[1, 2, 4, 6, 12, 15],
             templates=[Template([1, 2], 0.95, 0.3), Template([6, 12], 0.95, 0.3),
                        Template([4, 15], 0.9, 0.25)],
             background=0.05)


def test_gradient_integrity():
    t0 = time.perf_counter()
    rep = gradcheck_suite(seed=1, epsilon=1e-4, tolerance=1e-5, num_aus=4, dim=8, samples=2)
    secs = time.perf_counter() - t0
    groups = rep.group_max(2)
    ok = rep.ok and rep.worst <= 1e-5 and secs < 60.0
    record(1, ok, f"worst rel err {rep.worst:.2e} over {len(groups)} groups (<= 1e-5), "
                  f"{secs:.1f} s (< 60 s)")
    assert ok


def test_ggnn_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for c in (1, 2, 3):
        for d in (1, 2):
            for _ in range(10):
                p = ParamRegistry()
                ggnn.init_params(p, rng, c, d, d)
                for name in p.names():
                    p[name].data[...] = rng.normal(size=p[name].shape) * 0.5
                a_pos = rng.integers(0, 2, (c, c))
                a_neg = rng.integers(0, 2, (c, c)) * (1 - a_pos)
                np.fill_diagonal(a_neg, 0)
                A = assemble_adjacency(a_pos, a_neg, list(range(1, c + 1))).A.astype(float)
                H = rng.normal(size=(c, d))
                out = ggnn.propagate_step(ggnn.GGNNState(Tensor(H), 1, 2), A, p).H.data
                ref = ggnn_step_scalar(H.tolist(), A.tolist(),
                                       {g: p["ggnn." + g].data.tolist() for g in GATES})
                worst = max(worst, float(np.abs(out - np.array(ref)).max()))
    halving = True
    for T in (1, 2, 3, 6):
        p = ParamRegistry()
        ggnn.init_params(p, rng, 3, 4, 4)
        for name in p.names():
            p[name].data[...] = 0.0
        x = rng.normal(size=(3, 4))
        state = ggnn.init_hidden(Tensor(x), 4, T)
        A = np.ones((3, 12))
        while not state.done:
            state = ggnn.propagate_step(state, A, p)
        halving &= bool(np.array_equal(state.H.data, x / 2 ** (T - 1)))
    ok = worst <= 1e-12 and halving
    record(2, ok, f"max abs diff vs scalar oracle {worst:.1e} (<= 1e-12), "
                  f"zero-parameter halving exact: {halving}")
    assert ok


def test_graph_oracle():
    rng = np.random.default_rng(3)
    bad = []
    for k in range(50):
        m, c = int(rng.integers(1, 201)), int(rng.integers(1, 9))
        rows = (rng.uniform(size=(m, c)) < rng.uniform(0.05, 0.6, c)).astype(int)
        s = compute_edge_stats(LabelTable(list(range(1, c + 1)), rows))
        marginal, cond, counts = count_stats(rows.tolist())
        same = s.cooccurrence_counts.tolist() == counts
        same &= all(s.marginal[i] == float(marginal[i]) for i in range(c))
        same &= all((not s.defined[i, j]) if cond[i][j] is None
                    else s.defined[i, j] and s.conditional[i, j] == float(cond[i][j])
                    for i in range(c) for j in range(c))
        a_pos, a_neg = threshold_edges(s, 0.2, -0.03)
        pos, neg = threshold_oracle(rows.tolist(), 0.2, -0.03)
        same &= a_pos.tolist() == pos and a_neg.tolist() == neg
        A = assemble_adjacency(a_pos, a_neg, list(range(1, c + 1))).A
        same &= A.astype(int).tolist() == adjacency_oracle(pos, neg)
        same &= np.array_equal(A[:, 2 * c:3 * c], A[:, :c].T)
        same &= np.array_equal(A[:, 3 * c:], A[:, c:2 * c].T)
        same &= not np.diag(A[:, :c]).any() and not np.diag(A[:, c:2 * c]).any()
        if not same:
            bad.append(k)
    record(3, not bad, f"{50 - len(bad)}/50 random tables match the counting oracle exactly "
                       "with block-transpose and zero-diagonal structure")
    assert not bad


RECOVERY = {
    "pairs": SyntheticConfig(**PAIRS),
    "groups": SyntheticConfig(
        au_ids=[1, 2, 4, 6, 7, 12, 15, 24],
        templates=[Template([1, 2], 0.95, 0.2), Template([6, 7, 12], 0.9, 0.2),
                   Template([15, 24], 0.9, 0.15), Template([4], 0.9, 0.15)],
        exclusions=[(12, 15)], background=0.1),
    "bg0.3": SyntheticConfig(
        au_ids=[1, 2, 4, 6, 12],
        templates=[Template([1, 2, 4], 0.9, 0.3), Template([6, 12], 0.95, 0.3)],
        background=0.3),
}


def test_planted_edge_recovery():
    parts, ok = [], True
    for name, base in RECOVERY.items():
        planted = threshold_edges(population_edge_stats(base))
        hits = 0
        for seed in range(10):
            cfg = SyntheticConfig(**{**base.__dict__, "samples": 5000, "subjects": 10, "seed": seed})
            got = threshold_edges(compute_edge_stats(generate_synthetic(cfg).labels))
            hits += all(np.array_equal(g, p) for g, p in zip(got, planted))
        ok &= hits == 10
        parts.append(f"{name} {hits}/10")
    record(4, ok, "exact recovery at M=5000 over 10 seeds: " + ", ".join(parts))
    assert ok


def test_loss_and_metric_oracles():
    rng = np.random.default_rng(5)
    worst = 0.0
    for n, c in [(1, 1), (4, 3), (16, 6), (64, 12)]:
        p = rng.uniform(0, 1, (n, c))
        l = rng.integers(0, 2, (n, c))
        r = rng.uniform(0.01, 0.99, c)
        got = balanced_loss(Tensor(p), l, ClassBalance(r)).item()
        worst = max(worst, abs(got - balanced_loss_scalar(p.tolist(), l.tolist(), r.tolist())))
    worked = balanced_loss(Tensor(np.array([[0.5]])), [[1]], ClassBalance(np.array([0.25]))).item()
    auc_ok = True
    for _ in range(30):
        s = rng.integers(0, 5, 40) / 4
        t = rng.integers(0, 2, 40)
        if t.all() or not t.any():
            continue
        auc_ok &= auc(s, t) == float(auc_pairs(s.tolist(), t.tolist()))
    f1 = f1_score([1, 1, 0], [1, 0, 1])[2]
    ok = worst <= 1e-12 and abs(worked - 0.96994) <= 1e-4 and auc_ok and f1 == 0.5
    record(5, ok, f"loss vs oracle {worst:.1e} (<= 1e-12), worked value {worked:.6f} "
                  f"(0.96994 +/- 1e-4), AUC exact with ties: {auc_ok}, F1 {f1}")
    assert ok


def test_ablation_direction():
    t0 = time.perf_counter()
    syn = dict(PAIRS, subjects=12, samples=3000, noise=5.0, signal=1.0)
    tr = dict(learning_rate=1e-3, D=16, branch_channels=8, max_epochs=40, patience=6)
    scores = {"MS_RL": np.zeros((3, 3)), "SRERL": np.zeros((3, 3))}
    for s in range(3):
        ds = dataset_from_synthetic(generate_synthetic(SyntheticConfig(**syn, seed=s)), 3, s)
        for f in range(3):
            for v in scores:
                res = train(ds, TrainConfig(**tr, model_variant=v, seed=s, test_fold=f))
                scores[v][s, f] = evaluate(res.checkpoint, ds).macro_f1
    secs = time.perf_counter() - t0
    ms, sr = scores["MS_RL"].mean(), scores["SRERL"].mean()
    per_seed = scores["SRERL"].mean(1) - scores["MS_RL"].mean(1)
    ok = 0.6 <= ms <= 0.85 and sr - ms >= 0.01 and secs < 1800
    record(6, ok, f"MS_RL {ms:.4f} (in [0.6, 0.85]), SRERL {sr:.4f}, margin {sr - ms:+.4f} "
                  f"(>= 0.01), per-seed margins {np.round(per_seed, 4).tolist()}, {secs:.0f} s")
    assert ok


def test_balanced_loss_benefit():
    rare = 15
    syn = dict(au_ids=[1, 2, 4, 6, 12, 15],
               templates=[Template([1, 2], 0.95, 0.3), Template([6, 12], 0.95, 0.3),
                          Template([4], 0.9, 0.2), Template([rare], 1.0, 0.1)],
               background=0.05, subjects=12, samples=1200, noise=3.0, signal=1.0,
               signal_scale={rare: 0.5})
    r_pos = population_edge_stats(SyntheticConfig(**syn)).marginal[-1]
    tr = dict(learning_rate=1e-3, D=16, branch_channels=8, max_epochs=30, patience=6)
    diffs = []
    for s in range(3):
        ds = dataset_from_synthetic(generate_synthetic(SyntheticConfig(**syn, seed=s)), 3, s)
        f = {}
        for loss in ("balanced", "bce"):
            res = train(ds, TrainConfig(**tr, loss=loss, seed=s))
            f[loss] = evaluate(res.checkpoint, ds).per_au[rare]["f1"]
        diffs.append(f["balanced"] - f["bce"])
    gain = float(np.mean(diffs))
    ok = gain >= 0.02
    record(7, ok, f"rare AU{rare} (r_pos {r_pos:.3f}) F1 gain balanced vs bce {gain:+.4f} "
                  f"(>= 0.02), per seed {np.round(diffs, 4).tolist()}")
    assert ok


def test_determinism(tmp_path):
    def cli(*args):
        subprocess.run([sys.executable, "-m", "relgnn", *map(str, args)], check=True,
                       capture_output=True)

    cfg = SyntheticConfig(**PAIRS, samples=150, subjects=6, noise=1.0)
    (tmp_path / "syn.json").write_text(__import__("json").dumps(cfg.to_obj()))
    cli("gen-synth", "--config", tmp_path / "syn.json", "--out", tmp_path / "ds")
    for run in ("a", "b"):
        cli("train", "--manifest", tmp_path / "ds" / "manifest.json", "--out", tmp_path / run,
            "--epochs", "3", "--dim", "6", "--branch-channels", "2", "--lr", "3e-3",
            "--batch-size", "32", "--seed", "3")

    def files(root: Path):
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file()}

    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    ok = a == b and "history.csv" in a and any(k.startswith("checkpoint/") for k in a)
    record(8, ok, f"two CLI train runs byte-identical across {len(a)} files "
                  "(history, batch orders, checkpoint, report)")
    assert ok


def test_lrn_oracle():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=(8, 5, 5)) * 3
        y = lrn(Tensor(x)).data
        for c in range(8):
            for i in range(5):
                for j in range(5):
                    ref = lrn_scalar(list(x[:, i, j]), c, 2.0, 0.002, 0.75, 2)
                    worst = max(worst, abs(y[c, i, j] - ref))
    one = lrn(Tensor(np.ones((1, 1, 1)))).data.item()
    exact = 1.0 / (2.0 + 0.002 * 1 / 2 * 1.0) ** 0.75
    ok = worst <= 1e-12 and abs(one - 0.594362) <= 1e-6
    record(9, ok, f"8-channel oracle diff {worst:.1e} (<= 1e-12); single-channel value "
                  f"{one:.10f} (closed form {exact:.10f}) vs quoted 0.594362 differs by "
                  f"{abs(one - 0.594362):.1e} (tolerance 1e-6)")
    assert ok
