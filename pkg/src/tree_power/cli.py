"""Command-line pipeline: ``generate``, ``train``, ``eval``, ``bench`` and ``oracle``.

Every subcommand reads an optional JSON run configuration (``--config``)
layered over a preset (``--preset desk|paper``); command-line flags win
over both.  Exit status is 0 on success, 2 on usage or configuration
errors and 3 on runtime failures.  Machine-readable results go to files
and a short human summary goes to standard output.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as dsm
from . import evalbench as ev
from . import model as mdl
from . import sim
from . import trainer as tr

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


PRESETS = {
    "desk": {
        "format_version": CONFIG_VERSION,
        "network": {"L": 9, "N": 2, "mc_realizations": 100},
        "plan": [[2, 9, 500], [4, 9, 500]],
        "test_plan": [[2, 9, 100], [4, 9, 100]],
        "dataset": {"jitter_sigma": 5.0, "jitter_aps": False, "alternations": 2,
                    "position_scaling": "per_kind"},
        "model": {},
        "train": {"epochs": 30},
        "bench": {"K": [10, 20, 40], "L": 16, "reps": 50, "warmup": 10},
    },
    "paper": {
        "format_version": CONFIG_VERSION,
        "network": {"L": 16, "N": 4, "mc_realizations": 200},
        "plan": [[K, 16, 8000] for K in (2, 4, 6, 8, 10)],
        "test_plan": [[K, L, 200] for L in (1, 4, 9, 16, 25) for K in range(2, 41)],
        "dataset": {"jitter_sigma": 5.0, "jitter_aps": False, "alternations": 2,
                    "position_scaling": "per_kind"},
        "model": {},
        "train": {"epochs": 100},
        "bench": {"K": [10, 20, 30, 40], "L": 16, "reps": 100, "warmup": 10},
    },
}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_plan(plan, field: str) -> list:
    if not isinstance(plan, list) or not plan:
        raise ConfigError(f"{field}: must be a non-empty list of [K, L, count]")
    out = []
    for i, entry in enumerate(plan):
        if not isinstance(entry, (list, tuple)) or len(entry) != 3:
            raise ConfigError(f"{field}[{i}]: expected [K, L, count]")
        for name, v in zip(("K", "L", "count"), entry):
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{field}[{i}].{name}: must be a positive integer, got {v!r}")
        out.append(list(entry))
    return out


def load_config(path=None, preset: str = "desk") -> dict:
    """Preset merged with the JSON file at ``path``; validated."""
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config: top level must be an object")
        if user.get("format_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"format_version: unsupported version {user.get('format_version')!r}")
        cfg = _merge(cfg, user)
    cfg["plan"] = _check_plan(cfg.get("plan"), "plan")
    cfg["test_plan"] = _check_plan(cfg.get("test_plan"), "test_plan")
    try:
        network_config(cfg)
        mdl.ModelConfig.from_dict(cfg.get("model", {}))
        tr.TrainConfig(**cfg.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    scaling = cfg["dataset"].get("position_scaling", "per_kind")
    if scaling not in dsm.POSITION_SCALINGS:
        raise ConfigError(f"dataset.position_scaling: must be one of {dsm.POSITION_SCALINGS}")
    return cfg


def network_config(cfg: dict) -> sim.NetworkConfig:
    return sim.NetworkConfig.from_dict(cfg.get("network", {}))


def _seed(args, cfg: dict) -> int:
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise ConfigError("seed: required (pass --seed or set it in the config)")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: must be a non-negative integer, got {seed!r}")
    return seed


def _need_out(args) -> Path:
    if not args.out:
        raise ConfigError("out: --out is required")
    return Path(args.out)


def _need_file(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what}: path required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what}: file not found: {p}")
    return p


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_generate(args, cfg: dict) -> int:
    seed = _seed(args, cfg)
    out = _need_out(args)
    plan = cfg["test_plan"] if args.split == "test" else cfg["plan"]
    opts = cfg["dataset"]
    ds = dsm.build_corpus(plan, network_config(cfg), seed, split_tag=args.split,
                          jitter_sigma=opts.get("jitter_sigma", dsm.JITTER_SIGMA),
                          jitter_aps=opts.get("jitter_aps", False),
                          alternations=opts.get("alternations", 2),
                          position_scaling=opts.get("position_scaling", "per_kind"))
    dsm.save(ds, out)
    counts: dict = {}
    for s in ds.samples:
        counts[(s.K, s.L)] = counts.get((s.K, s.L), 0) + 1
    for (K, L), n in sorted(counts.items()):
        print(f"K={K} L={L}: {n} samples")
    print(f"oracle failures: {ds.n_failed}")
    print(f"wrote {out}")
    return EXIT_OK


def _rescale_extra(meta: dsm.NormalizationMeta) -> dict:
    return {"meta": dataclasses.asdict(meta)}


def cmd_train(args, cfg: dict) -> int:
    seed = _seed(args, cfg)
    out = _need_out(args)
    data = _need_file(args.data, "data")
    full = dsm.load(data)
    tcfg = tr.TrainConfig(**_merge(cfg["train"], {"seed": seed}))
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    tcfg = dataclasses.replace(tcfg, checkpoint_path=str(out.with_suffix(".state")))
    model_cfg = mdl.ModelConfig.from_dict(cfg.get("model", {}))
    train_ds, val_ds = dsm.stratified_split(full, tcfg.val_fraction, np.random.default_rng(seed))
    resume = None
    if args.resume:
        resume = _need_file(tcfg.checkpoint_path, "resume")
    try:
        best, report = tr.fit(model_cfg, train_ds, val_ds, tcfg, resume_from=resume, log_epochs=False)
    except tr.NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    tr.save_params(out, best, model_cfg, _rescale_extra(full.meta))
    csv_path = out.with_name(out.stem + "_loss.csv")
    report.write_csv(csv_path)
    for i, (a, b) in enumerate(zip(report.train_loss, report.val_loss), start=1):
        print(f"epoch {i}: train {a:.6f} val {b:.6f}")
    print(f"best epoch: {report.best_epoch}")
    print(f"wrote {out} and {csv_path}")
    return EXIT_OK


def _load_model(path):
    params, model_cfg, extra = tr.load_params(_need_file(path, "checkpoint"))
    meta = None
    if extra and extra.get("meta"):
        meta = dsm.NormalizationMeta(**extra["meta"])
    return params, model_cfg, meta


def cmd_eval(args, cfg: dict) -> int:
    out = _need_out(args)
    test = dsm.load(_need_file(args.data, "data"))
    net = test.cfg or network_config(cfg)
    rep = ev.EvalReport(environment=ev.environment(args.threads, args.precision))
    if args.predictor == "oracle":
        predictor = ev.oracle_predictor
    else:
        params, model_cfg, meta = _load_model(args.checkpoint)
        meta = meta or test.meta
        test.meta = meta
        pred = ev.power_cdfs(params, model_cfg, test, net)
        rep.cdf_ul = ev.cdf_rows(pred["pred_ul"], pred["opt_ul"])
        rep.cdf_dl = ev.cdf_rows(pred["pred_dl"], pred["opt_dl"])
        rep.ks_ul, rep.ks_dl = pred["ks_ul"], pred["ks_dl"]
        predictor = ev.model_predictor(params, model_cfg, meta, net)
        rep.flop_rows = ev.flop_rows(sorted({s.K for s in test.samples}), net.L, model_cfg)
    _, rep.se_rows, rep.skipped = ev.evaluate_se(predictor, test, net,
                                                 alternations=cfg["dataset"].get("alternations", 2))
    ev.report(rep, out)
    for r in rep.se_rows:
        print(f"K={r['K']} L={r['L']} n={r['n']}: UL gap {r['gap_ul']:.4f} of {r['oracle_ul']:.4f}, "
              f"DL gap {r['gap_dl']:.4f} of {r['oracle_dl']:.4f} b/s/Hz")
    if rep.ks_ul is not None:
        print(f"KS distance: UL {rep.ks_ul:.4f}, DL {rep.ks_dl:.4f}")
    print(f"skipped samples: {rep.skipped}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_bench(args, cfg: dict) -> int:
    out = _need_out(args)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    bench = cfg["bench"]
    K_list = args.K or bench["K"]
    L = args.L or bench["L"]
    if args.checkpoint:
        params, model_cfg, _ = _load_model(args.checkpoint)
    else:
        model_cfg = mdl.ModelConfig.from_dict(cfg.get("model", {}))
        params = mdl.init_params(model_cfg, seed)
    rep = ev.EvalReport(environment=ev.environment(args.threads, args.precision))
    for kind in ("tree", "full_attention"):
        rep.latency_rows += ev.latency_bench(kind, K_list, params, model_cfg, L=L, reps=bench["reps"],
                                             warmup=bench["warmup"], precision=args.precision,
                                             threads=args.threads, seed=seed)
    rep.flop_rows = ev.flop_rows(K_list, L, model_cfg)
    ev.report(rep, out)
    for r in rep.latency_rows:
        print(f"{r['model']:>14} K={r['K']:>3}: {r['mean_ms']:.3f} ms (std {r['std_ms']:.3f})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_oracle(args, cfg: dict) -> int:
    seed = _seed(args, cfg)
    net = network_config(cfg)
    K = args.K if args.K is not None else net.K
    L = args.L if args.L is not None else net.L
    net = net.replace(K=K, L=L)
    s = dsm.generate_sample(net, seed, alternations=cfg["dataset"].get("alternations", 2))
    print(f"scenario seed {seed}: K={K} L={L}")
    print("p_UL (mW): " + " ".join(f"{1e3 * p:.4f}" for p in s.p_ul_opt))
    print("p_DL (mW): " + " ".join(f"{1e3 * p:.4f}" for p in s.p_dl_opt))
    print(f"min SE UL: {s.min_se_ul:.6f} b/s/Hz")
    print(f"min SE DL: {s.min_se_dl:.6f} b/s/Hz")
    if args.out:
        Path(args.out).write_text(json.dumps({
            "seed": seed, "K": K, "L": L,
            "p_ul": s.p_ul_opt.tolist(), "p_dl": s.p_dl_opt.tolist(),
            "min_se_ul": s.min_se_ul, "min_se_dl": s.min_se_dl}, indent=2) + "\n")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench, "oracle": cmd_oracle}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--precision", choices=("f64", "f32"), default="f64")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tree-power",
                                     description="Tree-Transformer power allocation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="generate a labeled dataset")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="training dataset (JSONL)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from <out>.state")
    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a test dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="test dataset (JSONL)")
    p.add_argument("--predictor", choices=("model", "oracle"), default="model")
    p = sub.add_parser("bench", parents=[common], help="latency and MAC counts")
    p.add_argument("--checkpoint")
    p.add_argument("--K", type=int, nargs="+")
    p.add_argument("--L", type=int)
    p = sub.add_parser("oracle", parents=[common], help="solve one random scenario")
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.preset)
        if args.command == "eval" and args.predictor == "model" and not args.checkpoint:
            raise ConfigError("checkpoint: --checkpoint is required for model evaluation")
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, dsm.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
