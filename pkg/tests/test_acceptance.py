"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
pytest terminal summary (see conftest.py).
"""

import math
import time

import numpy as np
import pytest

from unihash.centers import HashCenterTable, generate_centers, min_pairwise_hamming
from unihash.cli import main, run_evaluation, run_gradcheck
from unihash.config import RunConfig
from unihash.dataset import generate_synthetic, split_seen_unseen
from unihash.errors import GenerationError
from unihash.network import ModelConfig, forward, init_params
from unihash.objectives import DetachSide, LossWeights, center_loss, mutual_loss, pairwise_terms
from unihash.retrieval import (
    PackedCode,
    PackedCodeIndex,
    hamming_distance,
    mean_average_precision,
    pack_bits,
    search,
)
from unihash.training import TrainConfig, detach_for_step, evaluate, train

TRAIN_SEEDS = (0, 1, 2)
FULL, CENTER_ONLY, PAIRWISE_ONLY, NO_MUTUAL = (4, 1, 1), (4, 0, 0), (0, 1, 0), (4, 1, 0)


# ---------------------------------------------------------------- 1

def test_gradient_fidelity(criterion):
    t0 = time.process_time()
    results = run_gradcheck(range(5), eps=1e-4)
    elapsed = time.process_time() - t0
    worst = max(max(groups.values()) for groups, _ in results.values())
    combos = len(results)
    ok = worst < 1e-4 and combos == 4 and elapsed < 60
    criterion(1, ok, f"max rel err {worst:.2e} over 5 seeds x {combos} combos, {elapsed:.1f}s cpu")
    assert ok


# ---------------------------------------------------------------- 2

def test_loss_closed_forms(criterion):
    U = np.random.default_rng(0).uniform(-1, 1, (16, 8))
    lm = mutual_loss(U, U.copy())
    per_pair = float(pairwise_terms(np.array(0.0), 1.0))
    sym = center_loss(np.array([[1.0, -1.0]]), np.array([[1, 0]]),
                      HashCenterTable(np.array([[1, 1], [-1, -1]]), 2))
    h = np.array([1, -1, -1, 1])
    aligned = center_loss(h[None, :].astype(float), np.array([[1, 0]]), HashCenterTable(np.array([h, -h]), 4))
    target = 2 * math.log1p(math.exp(-4.0))  # -2 ln sigmoid(4)
    checks = {
        "L_M(U,U)=0": lm == 0.0,
        "pair term ln2": abs(per_pair - math.log(2)) <= 1e-12,
        "symmetric 2ln2": abs(sym - 2 * math.log(2)) <= 1e-9,
        "aligned -2ln(sig 4)": abs(aligned - target) <= 1e-6,
    }
    ok = all(checks.values())
    criterion(2, ok, f"aligned={float(aligned):.8f} (closed form {target:.8f}); "
                     + ", ".join(k for k, v in checks.items() if not v))
    assert ok


# ---------------------------------------------------------------- 3

def test_routing_sparsity(criterion):
    cfg = ModelConfig(input_dim=8, feature_dim=8, code_len=8, num_experts=6, top_k=2)
    identical, weight_err, forwards = True, 0.0, 0
    for seed in range(10):
        for mode in ("sigmoid_norm", "softmax"):
            params = init_params(ModelConfig(**{**cfg.__dict__, "gate_mode": mode}), seed=seed)
            X = np.random.default_rng(seed).standard_normal((500, 8)) * 2
            U_c, U_p, cache = forward(params, X)
            forwards += len(X)
            for s in ("c", "p"):
                weight_err = max(weight_err, float(np.abs(cache["branch"][s]["w"].sum(axis=1) - 1).max()))
            # perturb every expert a sample did not select, one branch at a time
            for n in range(0, 500, 25):
                for s, U in (("c", U_c), ("p", U_p)):
                    unused = sorted(set(range(6)) - set(cache["branch"][s]["idx"][n].tolist()))
                    noisy = params.copy()
                    rng = np.random.default_rng([seed, n])
                    for k in ("w1", "b1", "w2", "b2"):
                        noisy.arrays[f"experts.{k}"][unused] += rng.standard_normal(
                            noisy.arrays[f"experts.{k}"][unused].shape)
                    b = 0 if s == "c" else 1
                    clean = forward(params, X[n:n + 1])[b]
                    identical &= np.array_equal(forward(noisy, X[n:n + 1])[b], clean)
                    identical &= np.allclose(clean[0], U[n], rtol=0, atol=1e-12)
    ok = identical and weight_err <= 1e-9 and forwards >= 10_000
    criterion(3, ok, f"outputs bit-identical={identical}, max |sum w - 1|={weight_err:.1e} "
                     f"over {forwards} forwards")
    assert ok


# ---------------------------------------------------------------- 4

def _naive_distance(a_bits, b_bits):
    return int(sum(int(x) != int(y) for x, y in zip(a_bits, b_bits)))


def test_retrieval_oracles(criterion):
    rng = np.random.default_rng(4)
    ham_ok = True
    for _ in range(10_000):
        q = int(rng.integers(1, 150))
        a, b = rng.integers(0, 2, (2, q))
        ham_ok &= hamming_distance(PackedCode(q, pack_bits(a)), PackedCode(q, pack_bits(b))) == _naive_distance(a, b)

    search_ok = True
    for _ in range(100):
        n, q = int(rng.integers(5, 200)), int(rng.integers(4, 20))
        bits = rng.integers(0, 2, (n, q))
        index = PackedCodeIndex(q, pack_bits(bits), np.arange(n), np.ones((n, 1)))
        qb = rng.integers(0, 2, q)
        d = (bits != qb).sum(axis=1)
        K = int(rng.integers(1, n + 5))
        oracle = sorted(range(n), key=lambda i: (d[i], i))[:K]
        search_ok &= search(index, PackedCode(q, pack_bits(qb)), K) == [(i, int(d[i])) for i in oracle]

    worst = 0.0
    for _ in range(100):
        q, C, K = 12, 5, int(rng.integers(1, 101))
        db_bits = rng.integers(0, 2, (100, q))
        db_lab = (rng.random((100, C)) < 0.3).astype(np.uint8)
        q_bits = rng.integers(0, 2, (20, q))
        q_lab = (rng.random((20, C)) < 0.3).astype(np.uint8)
        index = PackedCodeIndex(q, pack_bits(db_bits), np.arange(100), db_lab)
        aps = []
        for qb, ql in zip(q_bits, q_lab):
            d = [_naive_distance(qb, row) for row in db_bits]
            order = sorted(range(100), key=lambda i: (d[i], i))
            rel = [bool(np.any(ql & db_lab[i])) for i in order]
            R = sum(rel)
            hits, total = 0, 0.0
            for r, f in enumerate(rel[:K], start=1):
                if f:
                    hits += 1
                    total += hits / r
            aps.append(total / min(R, K) if R else 0.0)
        worst = max(worst, abs(mean_average_precision(pack_bits(q_bits), q_lab, index, K) - sum(aps) / 20))
    ok = ham_ok and search_ok and worst <= 1e-12
    criterion(4, ok, f"hamming exact={ham_ok}, search exact={search_ok}, max mAP diff={worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 5

def test_detach_schedule(criterion):
    cfg = ModelConfig(input_dim=8, feature_dim=8, code_len=8, num_experts=4, top_k=2)
    H = generate_centers(4, 8, "hadamard")
    gates = ("w1", "b1", "w2", "b2")
    ok = detach_for_step(2) is DetachSide.PAIRWISE and detach_for_step(1) is DetachSide.CENTER
    for seed in range(5):
        params = init_params(cfg, seed=seed)
        rng = np.random.default_rng(seed)
        X, Y = rng.standard_normal((6, 8)), np.eye(4)[rng.integers(0, 4, 6)]
        for t in range(1, 5):
            side = detach_for_step(t)
            g = evaluate(params, H, X, Y, LossWeights(0, 0, 1), side).grads
            frozen, live = ("gate_p", "gate_c") if t % 2 == 0 else ("gate_c", "gate_p")
            ok &= all(np.all(g[f"{frozen}.{k}"] == 0) for k in gates)
            ok &= any(np.any(g[f"{live}.{k}"] != 0) for k in gates)
    ds = generate_synthetic(4, 8, 10, 0.3, seed=0)
    tcfg = TrainConfig(epochs=4, batch_size=8, weights=LossWeights(0, 0, 1), model=cfg)
    _, log = train(tcfg, split_seen_unseen(ds, 1.0, 0))
    sides = [r.detach_side for r in log]
    ok &= sides == ["detach_center", "detach_pairwise", "detach_center", "detach_pairwise"]
    criterion(5, ok, f"per-epoch sides {sides}; zero gate grads on the detached branch")
    assert ok


# ---------------------------------------------------------------- 6

def test_center_separation(criterion):
    had = generate_centers(10, 16, "hadamard")
    d = min_pairwise_hamming(had)
    random_ok, attempts, errors = True, 0, 0
    rng = np.random.default_rng(6)
    for _ in range(200):
        C, q = int(rng.integers(2, 20)), int(rng.integers(4, 48))
        floor = int(rng.integers(0, q + 1))
        attempts += 1
        try:
            t = generate_centers(C, q, "random", d_floor=floor, seed=int(rng.integers(1 << 30)))
        except GenerationError:
            errors += 1
            continue
        c = t.centers.astype(int)
        brute = min(int((c[i] != c[j]).sum()) for i in range(C) for j in range(i + 1, C))
        random_ok &= brute >= floor and brute == t.min_distance
    ok = d == 8 and random_ok
    criterion(6, ok, f"hadamard(10,16) min distance {d}; random mode met floor or errored "
                     f"({attempts - errors} met, {errors} errored)")
    assert ok


# ---------------------------------------------------------------- 7, 8: trained on the default split

@pytest.fixture(scope="module")
def default_runs():
    cfg = RunConfig()
    ds = generate_synthetic(cfg.data.classes, cfg.data.dim, cfg.data.per_class, cfg.data.spread, cfg.data.seed)
    split = split_seen_unseen(ds, cfg.data.seen_ratio, cfg.data.split_seed)
    cache = {}

    def get(weights, seed):
        key = (weights, seed)
        if key not in cache:
            run = RunConfig()
            run.train.lambda1, run.train.lambda2, run.train.lambda3 = map(float, weights)
            run.train.seed = seed
            t0 = time.process_time()
            ckpt, log = train(run.train_config(ds.feature_dim), split)
            report = run_evaluation(run, ckpt, ds, split)
            cache[key] = (log, report, time.process_time() - t0)
        return cache[key]

    get.split = split
    return get


def test_consistency_direction(criterion, default_runs):
    log1, _, t1 = default_runs(FULL, 0)
    log0, _, t0 = default_runs(NO_MUTUAL, 0)
    seen = len(default_runs.split.seen_classes)
    ok = log1[-1].tau2 < log0[-1].tau2 and seen == 6 and t0 + t1 < 300
    criterion(7, ok, f"tau2 lambda3=1: {log1[-1].tau2:.5f} vs lambda3=0: {log0[-1].tau2:.5f} "
                     f"({seen} seen classes, {t0 + t1:.0f}s cpu)")
    assert ok


def test_paradigm_trend(criterion, default_runs):
    unseen_wins, seen_wins, rows = 0, 0, []
    for seed in TRAIN_SEEDS:
        full = default_runs(FULL, seed)[1].protocols
        center = default_runs(CENTER_ONLY, seed)[1].protocols
        pair = default_runs(PAIRWISE_ONLY, seed)[1].protocols
        u = (full["unseen@all"].map_selected, center["unseen@all"].map_selected)
        s = (full["seen@seen"].map_selected, pair["seen@seen"].map_selected)
        unseen_wins += u[0] >= u[1]
        seen_wins += s[0] >= s[1]
        rows.append(f"seed {seed}: unseen@all {u[0]:.4f} vs {u[1]:.4f}, seen@seen {s[0]:.4f} vs {s[1]:.4f}")
    need = len(TRAIN_SEEDS) // 2 + 1
    ok = unseen_wins >= need and seen_wins >= need
    criterion(8, ok, f"unseen@all full>=center-only in {unseen_wins}/3, "
                     f"seen@seen full>=pairwise-only in {seen_wins}/3; " + "; ".join(rows))
    assert ok


# ---------------------------------------------------------------- 9

def test_determinism(criterion, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = [main(["train", "--out", str(d)]) for d in (a, b)]
    same_ckpt = (a / "checkpoint.uhck").read_bytes() == (b / "checkpoint.uhck").read_bytes()
    same_log = (a / "train_log.csv").read_bytes() == (b / "train_log.csv").read_bytes()
    ok = codes == [0, 0] and same_ckpt and same_log
    criterion(9, ok, f"checkpoints identical={same_ckpt}, logs identical={same_log}")
    assert ok


# ---------------------------------------------------------------- 10

def test_ablation_plumbing(criterion, tmp_path):
    import json

    results = {}
    for name, flags in {"softmax": ["--gate-mode", "softmax"],
                        "unshared": ["--unshared-experts"],
                        "softmax+unshared": ["--gate-mode", "softmax", "--unshared-experts"]}.items():
        out = tmp_path / name.replace("+", "_")
        rc = main(["train", *flags, "--epochs", "20", "--out", str(out)])
        rc = rc or main(["eval", "--out", str(out)])
        valid = False
        if rc == 0:
            doc = json.loads((out / "metrics.json").read_text())
            maps = [m[k] for m in doc["protocols"].values() for k in ("map_center", "map_pairwise")]
            valid = len(maps) == 8 and all(0 <= v <= 1 for v in maps)
        results[name] = rc == 0 and valid
    ok = all(results.values())
    criterion(10, ok, ", ".join(f"{k}={'ok' if v else 'failed'}" for k, v in results.items()))
    assert ok
