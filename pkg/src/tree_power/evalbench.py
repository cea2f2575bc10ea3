"""Evaluation and benchmarking: power CDFs, min-SE gaps, latency and MAC counts."""

from __future__ import annotations

import csv
import gc
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as dsm
from . import model as mdl
from . import oracle, sim
from .sim import DL, UL, NetworkConfig

log = logging.getLogger(__name__)

DOMINANCE_TOL = 1e-6
EVAL_TOL = 1e-9


@dataclass
class EvalReport:
    cdf_ul: list = field(default_factory=list)     # rows: (source, value, fraction)
    cdf_dl: list = field(default_factory=list)
    se_rows: list = field(default_factory=list)    # per (K, L) aggregates
    latency_rows: list = field(default_factory=list)
    flop_rows: list = field(default_factory=list)
    ks_ul: float | None = None
    ks_dl: float | None = None
    skipped: int = 0
    environment: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# distributions
# --------------------------------------------------------------------------

def empirical_cdf(values):
    """Right-continuous ECDF as ``(sorted unique values, fraction <= value)``."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("empirical_cdf: empty input")
    uniq, counts = np.unique(x, return_counts=True)
    return uniq, np.cumsum(counts) / x.size


def ks_distance(x, y) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_x - F_y|``."""
    x = np.sort(np.asarray(x, dtype=float).ravel())
    y = np.sort(np.asarray(y, dtype=float).ravel())
    if x.size == 0 or y.size == 0:
        raise ValueError("ks_distance: empty input")
    grid = np.concatenate([x, y])
    fx = np.searchsorted(x, grid, side="right") / x.size
    fy = np.searchsorted(y, grid, side="right") / y.size
    return float(np.max(np.abs(fx - fy)))


# --------------------------------------------------------------------------
# spectral efficiency evaluation
# --------------------------------------------------------------------------

def model_predictor(params: dict, model_cfg: mdl.ModelConfig, meta, cfg: NetworkConfig,
                    kind: str = "tree"):
    """Predictor ``(sample, solution) -> (p_ul, p_dl)`` for a trained model."""
    rc = mdl.RescaleConfig.from_meta(meta, cfg.total_dl_budget)

    def predict(sample, _solution):
        ap, ue, _ = dsm.sample_features(sample, meta)
        budget = sample.L * cfg.P_dl_max_per_ap
        return mdl.predict(params, ap, ue, model_cfg, rc, kind=kind, total_dl_budget=budget)

    return predict


def oracle_predictor(sample, solution):
    """Inject the re-solved oracle powers (zero-gap reference)."""
    return solution.ul.p, solution.dl.p


def evaluate_se(predictor, test_ds: dsm.Dataset, cfg: NetworkConfig, alternations: int = 2,
                eval_round: int = 0, check_dominance: bool = True):
    """Min-SE under predicted and re-solved oracle powers for every test sample.

    Channel statistics are rebuilt from each sample's seed; the Monte-Carlo
    realizations come from a separate evaluation stream.  Predicted powers
    are scored on the same moments the oracle is re-solved on.
    Returns ``(per_sample_rows, per_group_rows, skipped)``.
    """
    rows = []
    skipped = 0
    for s in test_ds.samples:
        kcfg = cfg.replace(K=s.K, L=s.L)
        try:
            stats = dsm.scenario_stats(s, kcfg)
            seq = np.random.SeedSequence(s.seed).spawn(5 + eval_round)[-1]
            sol = oracle.solve_scenario(stats, kcfg, np.random.default_rng(seq), alternations, tol=EVAL_TOL)
        except (np.linalg.LinAlgError, ValueError, ZeroDivisionError) as exc:
            skipped += 1
            log.warning("evaluate_se: skipped sample %d: %s", s.seed, exc)
            continue
        p_ul, p_dl = predictor(s, sol)
        se_ul = float(np.min(sim.se(UL, sim.sinr(UL, sol.ul_moments, p_ul), kcfg)))
        se_dl = float(np.min(sim.se(DL, sim.sinr(DL, sol.dl_moments, p_dl), kcfg)))
        row = dict(seed=s.seed, K=s.K, L=s.L,
                   pred_ul=se_ul, oracle_ul=float(sol.ul.min_se), gap_ul=float(sol.ul.min_se) - se_ul,
                   pred_dl=se_dl, oracle_dl=float(sol.dl.min_se), gap_dl=float(sol.dl.min_se) - se_dl)
        if check_dominance:
            for side in ("ul", "dl"):
                if row[f"pred_{side}"] > row[f"oracle_{side}"] + DOMINANCE_TOL:
                    raise AssertionError(f"oracle dominance violated on sample {s.seed} ({side}): "
                                         f"{row[f'pred_{side}']} > {row[f'oracle_{side}']}")
        rows.append(row)
    return rows, aggregate_se(rows), skipped


def aggregate_se(rows) -> list:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["K"], r["L"]), []).append(r)
    out = []
    for (K, L) in sorted(groups):
        g = groups[(K, L)]
        agg = dict(K=K, L=L, n=len(g))
        for key in ("pred_ul", "oracle_ul", "gap_ul", "pred_dl", "oracle_dl", "gap_dl"):
            agg[key] = float(np.mean([r[key] for r in g]))
        out.append(agg)
    return out


def power_cdfs(params: dict, model_cfg: mdl.ModelConfig, test_ds: dsm.Dataset, cfg: NetworkConfig,
               kind: str = "tree"):
    """Predicted and label powers (watts) over every user of the test set, with KS distances."""
    rc = mdl.RescaleConfig.from_meta(test_ds.meta, cfg.total_dl_budget)
    pred_ul, pred_dl, opt_ul, opt_dl = [], [], [], []
    for s in test_ds.samples:
        ap, ue, _ = dsm.sample_features(s, test_ds.meta)
        pu, pd = mdl.predict(params, ap, ue, model_cfg, rc, kind=kind,
                             total_dl_budget=s.L * cfg.P_dl_max_per_ap)
        pred_ul.append(pu)
        pred_dl.append(pd)
        opt_ul.append(s.p_ul_opt)
        opt_dl.append(s.p_dl_opt)
    pu, pd = np.concatenate(pred_ul), np.concatenate(pred_dl)
    ou, od = np.concatenate(opt_ul), np.concatenate(opt_dl)
    return dict(pred_ul=pu, pred_dl=pd, opt_ul=ou, opt_dl=od,
                ks_ul=ks_distance(pu, ou), ks_dl=ks_distance(pd, od))


def cdf_rows(pred, opt) -> list:
    rows = []
    for source, values in (("oracle", opt), ("predicted", pred)):
        x, f = empirical_cdf(values)
        rows.extend((source, float(v), float(q)) for v, q in zip(x, f))
    return rows


# --------------------------------------------------------------------------
# cost
# --------------------------------------------------------------------------

def encoder_macs(T: int, cfg: mdl.ModelConfig) -> int:
    """One encoder layer on ``T`` tokens: projections, scores, weighting and FFN."""
    d = cfg.d_mod
    return 4 * T * d * d + 2 * T * T * d + 2 * T * d * cfg.ffn


def flop_count(kind: str, K: int, L: int, cfg: mdl.ModelConfig) -> int:
    """Analytic multiply-accumulate count of one forward pass."""
    e, d = cfg.d_enc, cfg.d_mod
    ap = L * (2 * e + e * e)
    per_user = 2 * e + 2 * e * d + (2 * e + d) * cfg.decoder_hidden + 2 * cfg.decoder_hidden
    if kind == "tree":
        return ap + K * per_user + mdl.n_merges(K, cfg.tree_padding) * 2 * d * d + cfg.S * encoder_macs(1, cfg)
    if kind == "full_attention":
        return ap + K * per_user + cfg.S * encoder_macs(K, cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def root_encoder_macs(cfg: mdl.ModelConfig) -> int:
    return cfg.S * encoder_macs(1, cfg)


def latency_bench(kind: str, K_list, params: dict, model_cfg: mdl.ModelConfig, L: int = 16,
                  reps: int = 100, warmup: int = 10, precision: str = "f64", threads: int = 1,
                  seed: int = 0, rc: mdl.RescaleConfig | None = None) -> list:
    """Wall-clock of one single-scenario forward (rescale included) per K.

    Returns rows ``dict(model, K, L, mean_ms, std_ms, reps, threads, precision)``.
    """
    from threadpoolctl import threadpool_limits

    if reps < 30 or warmup < 5:
        raise ValueError("latency_bench: reps >= 30 and warmup >= 5 required")
    dtype = np.float32 if precision == "f32" else np.float64
    p = {k: v.astype(dtype) for k, v in params.items()}
    rc = rc or mdl.RescaleConfig(0.0, 0.1, 0.0, 1.0, L * 0.2)
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=threads):
        for K in K_list:
            ap = rng.random((L, 2)).astype(dtype)
            ue = rng.random((K, 2)).astype(dtype)
            for _ in range(warmup):
                mdl.predict(p, ap, ue, model_cfg, rc, kind=kind)
            times = np.empty(reps)
            # collector pauses land in random reps, as in timeit
            gc_was_enabled = gc.isenabled()
            gc.disable()
            try:
                for i in range(reps):
                    t0 = time.perf_counter()
                    mdl.predict(p, ap, ue, model_cfg, rc, kind=kind)
                    times[i] = time.perf_counter() - t0
            finally:
                if gc_was_enabled:
                    gc.enable()
            rows.append(dict(model=kind, K=int(K), L=int(L), mean_ms=float(times.mean() * 1e3),
                             std_ms=float(times.std(ddof=1) * 1e3), reps=reps, threads=threads,
                             precision=precision))
    return rows


def flop_rows(K_list, L: int, cfg: mdl.ModelConfig, kinds=("tree", "full_attention")) -> list:
    return [dict(model=k, K=int(K), L=int(L), macs=flop_count(k, K, L, cfg)) for k in kinds for K in K_list]


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header] if isinstance(r, dict) else list(r))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


SE_COLUMNS = ["K", "L", "n", "pred_ul", "oracle_ul", "gap_ul", "pred_dl", "oracle_dl", "gap_dl"]
LAT_COLUMNS = ["model", "K", "L", "mean_ms", "std_ms", "reps", "threads", "precision"]
FLOP_COLUMNS = ["model", "K", "L", "macs"]


def report(rep: EvalReport, outdir) -> list:
    """Write ``cdf_ul.csv``, ``cdf_dl.csv``, ``se_table.csv``, ``latency.csv``, ``flops.csv``, ``summary.txt``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "cdf_ul.csv", ["source", "power_w", "fraction"], rep.cdf_ul)
    _write_csv(out / "cdf_dl.csv", ["source", "power_w", "fraction"], rep.cdf_dl)
    _write_csv(out / "se_table.csv", SE_COLUMNS, rep.se_rows)
    _write_csv(out / "latency.csv", LAT_COLUMNS, rep.latency_rows)
    _write_csv(out / "flops.csv", FLOP_COLUMNS, rep.flop_rows)
    lines = ["tree-power evaluation summary"]
    for k in sorted(rep.environment):
        lines.append(f"env.{k}: {rep.environment[k]}")
    lines.append(f"ks_ul: {rep.ks_ul if rep.ks_ul is not None else 'not run'}")
    lines.append(f"ks_dl: {rep.ks_dl if rep.ks_dl is not None else 'not run'}")
    if rep.se_rows:
        for r in rep.se_rows:
            lines.append(f"se K={r['K']} L={r['L']} n={r['n']}: UL pred {r['pred_ul']:.4f} oracle "
                         f"{r['oracle_ul']:.4f} gap {r['gap_ul']:.4f} | DL pred {r['pred_dl']:.4f} "
                         f"oracle {r['oracle_dl']:.4f} gap {r['gap_dl']:.4f}")
    else:
        lines.append("se: not run")
    lines.append(f"se skipped samples: {rep.skipped}")
    if rep.latency_rows:
        for r in rep.latency_rows:
            lines.append(f"latency {r['model']} K={r['K']} L={r['L']}: {r['mean_ms']:.4f} ms "
                         f"(std {r['std_ms']:.4f}, reps {r['reps']})")
    else:
        lines.append("latency: not run")
    if rep.flop_rows:
        for r in rep.flop_rows:
            lines.append(f"macs {r['model']} K={r['K']} L={r['L']}: {r['macs']}")
    else:
        lines.append("flops: not run")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return [out / n for n in ("cdf_ul.csv", "cdf_dl.csv", "se_table.csv", "latency.csv",
                              "flops.csv", "summary.txt")]


def environment(threads: int = 1, precision: str = "f64") -> dict:
    return dict(threads=threads, precision=precision, cpu_count=os.cpu_count(), numpy=np.__version__)
