"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 7, 8 and 10 share the desk-scale pipeline fixture (generate,
train and evaluate through the CLI), which takes a few minutes.
"""

import math
import time

import numpy as np
import pytest

from tree_power import autodiff as ad
from tree_power import dataset as D
from tree_power import evalbench as E
from tree_power import model as M
from tree_power import oracle, sim
from tree_power import trainer as T
from tree_power.sim import DL, UL

from conftest import ACCEPTANCE_LINES

CFG = M.ModelConfig()


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def sample_cov(x):
    return x.T @ x.conj() / x.shape[0]


def normalized_cov_error(emp, ref):
    """Entrywise ``|emp - ref| / sqrt(ref_ii ref_jj)``."""
    d = np.real(np.diag(ref))
    return float(np.max(np.abs(emp - ref) / np.sqrt(np.outer(d, d))))


# --------------------------------------------------------------------------
# 1-4: model structure and gradients
# --------------------------------------------------------------------------

def test_criterion_1_tree_structure():
    t0 = time.perf_counter()
    bad = []
    for K in range(1, 65):
        sched = M.tree_schedule(K, CFG.tree_padding)
        depth = math.ceil(math.log2(K)) if K > 1 else 0
        merges = M.n_merges(K, CFG.tree_padding)
        if len(sched) != depth or merges > K:
            bad.append((K, len(sched), merges))
    k8 = (len(M.tree_schedule(8)), M.n_merges(8))
    elapsed = time.perf_counter() - t0
    ok = not bad and k8 == (3, 7) and elapsed < 1.0
    record(1, ok, f"K=8 stages/merges {k8}, violations {bad[:3]}, {elapsed:.3f}s")


def test_criterion_2_root_encoder_cost():
    params = M.as_tensors(M.init_params(CFG, seed=0))
    counts = {}
    for K in (2, 8, 40):
        r = np.random.default_rng(K)
        z = M.fuse(M.ue_embed(r.random((K, 2)), params), M.ap_encode(r.random((16, 2)), params)[1])
        root = M.tree_compress(z, params, CFG)
        with ad.count_macs() as c:
            M.root_encode(root, params, CFG)
        counts[K] = c.macs
    ok = len(set(counts.values())) == 1 and counts[2] == E.root_encoder_macs(CFG)
    record(2, ok, f"MACs {counts}")


def test_criterion_3_rescaler():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    worst, box_ok = 0.0, True
    for i in range(10_000):
        K = int(r.integers(1, 41))
        L = int(r.integers(1, 26))
        rc = M.RescaleConfig(ul_min=r.uniform(0, 0.01), ul_max=r.uniform(0.01, 0.1),
                             dl_min=r.uniform(0, 0.05), dl_max=r.uniform(0.05, 2.0),
                             total_dl_budget=0.2 * L)
        p_ul, p_dl = M.rescale(r.random((K, 2)), rc)
        worst = max(worst, abs(p_dl.sum() - rc.total_dl_budget) / rc.total_dl_budget)
        box_ok &= bool(np.all((p_ul >= rc.ul_min) & (p_ul <= rc.ul_max)))
    elapsed = time.perf_counter() - t0
    record(3, worst < 1e-12 and box_ok and elapsed < 5.0,
           f"max budget rel err {worst:.2e}, UL box {box_ok}, {elapsed:.2f}s")


def _op_checks(r):
    """(name, f, params, tolerance) for every differentiable operation."""
    x34, w34 = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    y = r.normal(size=(3, 4))
    y[np.abs(y) < 1e-3] = 0.5
    # fixed projections: drawing inside f would change the function between evaluations
    w53, w235, w33, w36, w44, w4, w3 = (r.normal(size=s) for s in ((5, 3), (2, 3, 5), (3, 3), (3, 6), (4, 4), 4, 3))
    lin = 1e-5
    norm = 1e-4
    return [
        ("add", lambda p: ad.sum(ad.add(p["a"], p["b"]) * w34), dict(a=x34, b=r.normal(size=4)), lin),
        ("sub", lambda p: ad.sum(ad.sub(p["a"], p["b"]) * w34), dict(a=x34, b=r.normal(size=(3, 1))), lin),
        ("mul", lambda p: ad.sum(ad.mul(p["a"], p["b"]) * w34), dict(a=x34, b=r.normal(size=(3, 4))), lin),
        ("relu", lambda p: ad.sum(ad.relu(p["a"]) * w34), dict(a=y), lin),
        ("sigmoid", lambda p: ad.sum(ad.sigmoid(p["a"]) * w34), dict(a=x34), lin),
        ("matmul", lambda p: ad.sum(ad.matmul(p["a"], p["b"]) * w53),
         dict(a=r.normal(size=(5, 4)), b=r.normal(size=(4, 3))), lin),
        ("linear", lambda p: ad.sum(ad.linear(p["x"], p["W"], p["b"]) * w235),
         dict(x=r.normal(size=(2, 3, 4)), W=r.normal(size=(5, 4)), b=r.normal(size=5)), lin),
        ("reshape+swapaxes", lambda p: ad.sum(ad.swapaxes(ad.reshape(p["a"], (2, 6)), 0, 1) * w34.reshape(6, 2)),
         dict(a=x34), lin),
        ("getitem", lambda p: ad.sum(p["a"][np.array([0, 0, 2]), 1:] * w33), dict(a=x34), lin),
        ("broadcast_to", lambda p: ad.sum(ad.broadcast_to(p["a"], (3, 4)) * w34), dict(a=r.normal(size=(1, 4))), lin),
        ("concat", lambda p: ad.sum(ad.concat([p["a"], p["b"]], axis=1) * w36),
         dict(a=x34, b=r.normal(size=(3, 2))), lin),
        ("pad_zeros", lambda p: ad.sum(ad.pad_zeros(p["a"], 1, axis=0) * w44), dict(a=x34), lin),
        ("sum", lambda p: ad.sum(ad.sum(p["a"], axis=0) * w4), dict(a=x34), lin),
        ("mean", lambda p: ad.sum(ad.mean(p["a"], axis=1) * w3), dict(a=x34), lin),
        ("mse_loss", lambda p: ad.mse_loss(p["a"], w34), dict(a=x34), lin),
        ("softmax", lambda p: ad.sum(ad.softmax(p["a"]) * w34), dict(a=x34), norm),
        ("layer_norm", lambda p: ad.sum(ad.layer_norm(p["a"], p["g"], p["b"]) * w34),
         dict(a=x34, g=r.normal(size=4), b=r.normal(size=4)), norm),
    ]


def test_criterion_4_gradient_fidelity():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    failures, worst = [], {}
    for name, f, params, tol in _op_checks(r):
        err = ad.gradient_check(f, params)
        worst[name] = err
        if not err < tol:
            failures.append(name)
    ap, ue = r.random((2, 2)), r.random((3, 2))
    target = r.random((1, 3, 2))
    small = M.ModelConfig(d_enc=4, d_mod=8, A=2, S=2, decoder_hidden=8, ffn_hidden=16)
    for label, cfg, kw in (("model (reduced widths, every coordinate)", small, {}),
                           ("model (default widths, 25 coordinates per tensor)", CFG, dict(sample=25))):
        err = ad.gradient_check(lambda P: ad.mse_loss(M.forward(ap, ue, P, cfg), target),
                                M.init_params(cfg, seed=0), **kw)
        worst[label] = err
        if not err < 1e-4:
            failures.append(label)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    record(4, not failures and elapsed < 120,
           f"worst {top} {worst[top]:.2e}, failures {failures}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 5-6: oracle and channel statistics
# --------------------------------------------------------------------------

def test_criterion_5_oracle_correctness():
    t0 = time.perf_counter()
    cfg = sim.NetworkConfig(K=2, L=9, N=2, mc_realizations=100)
    worst_gap, worst_eq, beaten = 0.0, 0.0, []
    for i in range(50):
        rng = np.random.default_rng(5000 + i)
        ap, ue = sim.generate_layout(cfg, rng)
        stats = sim.channel_statistics(ap, ue, cfg, rng)
        sol = oracle.solve_scenario(stats, cfg, rng)
        _, lin_ul = oracle.grid_search_ul(sol.ul_moments, cfg)
        _, grid_ul = oracle.grid_search_ul(sol.ul_moments, cfg, spacing="log")
        _, grid_dl = oracle.grid_search_dl(sol.dl_moments, cfg)
        if sol.ul.min_se < max(lin_ul, grid_ul) * (1 - 1e-9) or sol.dl.min_se < grid_dl * (1 - 1e-6):
            beaten.append(i)
        worst_gap = max(worst_gap, abs(sol.ul.min_se - grid_ul) / grid_ul,
                        abs(sol.dl.min_se - grid_dl) / grid_dl)
        s_ul = sim.sinr(UL, sol.ul_moments, sol.ul.p)
        free = sol.ul.p < cfg.P_ul_max * (1 - 1e-9)
        if free.any():
            worst_eq = max(worst_eq, float(np.max(np.abs(s_ul[free] / sol.ul.gamma_star - 1))))
        s_dl = sim.sinr(DL, sol.dl_moments, sol.dl.p)
        worst_eq = max(worst_eq, float(np.max(np.abs(s_dl / sol.dl.gamma_star - 1))))
    elapsed = time.perf_counter() - t0
    record(5, worst_gap < 0.01 and worst_eq < 1e-3 and not beaten and elapsed < 300,
           f"max |bisection - grid| / grid {worst_gap:.2e}, max equal-SINR dev {worst_eq:.2e}, "
           f"grid beats bisection on {beaten}, {elapsed:.1f}s")


def test_criterion_6_channel_statistics():
    t0 = time.perf_counter()
    cfg = sim.NetworkConfig(L=2, N=4, K=2, mc_realizations=100)
    rng = np.random.default_rng(6)
    ap, ue = sim.generate_layout(cfg, rng)
    stats = sim.channel_statistics(ap, ue, cfg, rng)
    H, H_hat = sim.draw_realizations(stats, cfg, np.random.default_rng(7), 100_000)
    worst_h, worst_hat = 0.0, 0.0
    for k in range(cfg.K):
        for l in range(cfg.L):
            sl = slice(cfg.N * l, cfg.N * (l + 1))
            worst_h = max(worst_h, normalized_cov_error(sample_cov(H[:, k, sl]), stats.beta[l, k] * stats.R[l, k]))
            worst_hat = max(worst_hat, normalized_cov_error(sample_cov(H_hat[:, k, sl]), stats.Phi[l, k]))
    elapsed = time.perf_counter() - t0
    record(6, worst_h < 0.05 and worst_hat < 0.05 and elapsed < 300,
           f"max normalized entry error cov(h) {worst_h:.4f}, cov(h_hat) {worst_hat:.4f}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 7, 8, 10: desk-scale pipeline
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_eval(desk_run):
    params, model_cfg, extra = T.load_params(desk_run["model"])
    meta = D.NormalizationMeta(**extra["meta"])
    test = D.load(desk_run["test"])
    test.meta = meta
    net = test.cfg
    t0 = time.perf_counter()
    rows, groups, skipped = E.evaluate_se(E.model_predictor(params, model_cfg, meta, net), test, net,
                                          check_dominance=False)
    cdfs = E.power_cdfs(params, model_cfg, test, net)
    header, loss_rows = E.read_csv(desk_run["loss"])
    val = [float(r[header.index("val_loss")]) for r in loss_rows]
    return dict(rows=rows, groups=groups, skipped=skipped, cdfs=cdfs, val=val,
                seconds=time.perf_counter() - t0)


def test_criterion_7_desk_training(desk_eval):
    val = desk_eval["val"]
    ratio = val[-1] / val[0]
    rows = desk_eval["rows"]
    gaps = {side: float(np.mean([r[f"gap_{side}"] for r in rows]) / np.mean([r[f"oracle_{side}"] for r in rows]))
            for side in ("ul", "dl")}
    ok = len(val) == 30 and ratio < 0.5 and max(gaps.values()) <= 0.15
    record(7, ok, f"val loss epoch 30 / epoch 1 = {ratio:.3f}, mean gap / oracle UL {gaps['ul']:.3f} "
                  f"DL {gaps['dl']:.3f}")


def test_criterion_8_cdf_agreement(desk_eval):
    ks_ul, ks_dl = desk_eval["cdfs"]["ks_ul"], desk_eval["cdfs"]["ks_dl"]
    record(8, ks_ul < 0.15 and ks_dl < 0.15 and desk_eval["seconds"] < 300,
           f"KS UL {ks_ul:.3f}, DL {ks_dl:.3f}, eval {desk_eval['seconds']:.1f}s")


def test_criterion_10_oracle_dominance(desk_eval):
    rows = desk_eval["rows"]
    violations = [(r["seed"], side) for r in rows for side in ("ul", "dl")
                  if r[f"pred_{side}"] > r[f"oracle_{side}"] + E.DOMINANCE_TOL]
    record(10, not violations and len(rows) > 0,
           f"{len(rows)} samples, {desk_eval['skipped']} skipped, violations {violations[:3]}")


# --------------------------------------------------------------------------
# 9: latency
# --------------------------------------------------------------------------

def test_criterion_9_latency_scaling():
    t0 = time.perf_counter()
    ratios = {}
    for kind in ("tree", "full_attention"):
        params = M.init_params(CFG, seed=0, kind=kind)
        rows = E.latency_bench(kind, [10, 40], params, CFG, L=16, reps=100, warmup=10, threads=1)
        ratios[kind] = rows[1]["mean_ms"] / rows[0]["mean_ms"]
    elapsed = time.perf_counter() - t0
    ok = ratios["tree"] <= 2.5 and ratios["tree"] < ratios["full_attention"] and elapsed < 120
    record(9, ok, f"t(40)/t(10) tree {ratios['tree']:.2f}, baseline {ratios['full_attention']:.2f}, "
                  f"{elapsed:.1f}s")
