"""Mini-batch MSE training with AdamW, homogeneous-K batching and best-checkpoint selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .dataset import Dataset, sample_features

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    val_fraction: float = 0.1
    weight_decay: float = 0.01
    checkpoint_path: str | None = None
    early_stop_patience: int | None = None

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("TrainConfig: lr >= 0, batch_size >= 1 and epochs >= 0 required")
        if not 0 < self.val_fraction < 1:
            raise ValueError("TrainConfig.val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for i, (tr, va, s) in enumerate(zip(self.train_loss, self.val_loss, self.seconds), start=1):
                w.writerow([i, repr(tr), repr(va), f"{s:.3f}"])


@dataclass
class Batch:
    ap: np.ndarray      # (B, L, 2)
    ue: np.ndarray      # (B, K, 2)
    target: np.ndarray  # (B, K, 2)
    indices: list


class FeatureCache:
    """Normalized features of a dataset, computed once."""

    def __init__(self, ds: Dataset):
        self.ds = ds
        self.features = [sample_features(s, ds.meta) for s in ds.samples]

    def groups(self) -> dict:
        out: dict = {}
        for i, s in enumerate(self.ds.samples):
            out.setdefault((s.K, s.L), []).append(i)
        return out

    def batch(self, idx) -> Batch:
        ap, ue, tgt = zip(*(self.features[i] for i in idx))
        return Batch(np.stack(ap), np.stack(ue), np.stack(tgt), list(idx))


def make_batches(ds, batch_size: int, rng: np.random.Generator | None):
    """Shuffle within each (K, L) group, chunk, then shuffle the chunk order.

    ``ds`` is a :class:`Dataset` or a :class:`FeatureCache`.  With
    ``rng=None`` the order is deterministic and unshuffled.
    """
    cache = ds if isinstance(ds, FeatureCache) else FeatureCache(ds)
    if not cache.ds.samples:
        raise ValueError("make_batches: empty dataset")
    chunks = []
    for key in sorted(cache.groups()):
        idx = np.array(cache.groups()[key])
        if rng is not None:
            rng.shuffle(idx)
        for start in range(0, len(idx), batch_size):
            chunks.append(idx[start:start + batch_size].tolist())
    if rng is not None:
        order = rng.permutation(len(chunks))
        chunks = [chunks[i] for i in order]
    for c in chunks:
        yield cache.batch(c)


def batch_loss(params: dict, batch: Batch, cfg: mdl.ModelConfig, requires_grad: bool = True):
    P = mdl.as_tensors(params, requires_grad=requires_grad)
    pred = mdl.forward(batch.ap, batch.ue, P, cfg)
    return ad.mse_loss(pred, batch.target), P


def train_epoch(params: dict, ds, cfg: mdl.ModelConfig, opt_state: ad.OptimizerState,
                tcfg: TrainConfig, rng: np.random.Generator, epoch: int = 0):
    """One pass over ``ds``; returns ``(params, mean batch loss)``."""
    losses = []
    for b, batch in enumerate(make_batches(ds, tcfg.batch_size, rng)):
        loss, P = batch_loss(params, batch, cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            loss.backward()
            gmax = max((float(np.max(np.abs(t.grad))) for t in P.values() if t.grad is not None),
                       default=float("nan"))
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b} (max |grad| = {gmax})")
        loss.backward()
        grads = {k: t.grad for k, t in P.items() if t.grad is not None}
        ad.adamw_step(params, grads, opt_state)
        losses.append(value)
    return params, float(np.mean(losses))


def validate(params: dict, ds, cfg: mdl.ModelConfig, batch_size: int = 256) -> float:
    """Mean per-sample normalized MSE (every (K, L) group weighted by its sample count)."""
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in make_batches(ds, batch_size, None):
            P = mdl.as_tensors(params)
            pred = mdl.forward(batch.ap, batch.ue, P, cfg).data
            per_sample = np.mean((pred - batch.target) ** 2, axis=(1, 2))
            total += float(per_sample.sum())
            count += len(per_sample)
    return total / count


def _state_arrays(params: dict, opt: ad.OptimizerState) -> dict:
    arrays = dict(params)
    for k in params:
        if k in opt.m:
            arrays["adam.m." + k] = opt.m[k]
            arrays["adam.v." + k] = opt.v[k]
    return arrays


def save_training_state(path, params: dict, opt: ad.OptimizerState, model_cfg: mdl.ModelConfig,
                        report: TrainReport, rng: np.random.Generator, best_params: dict | None = None,
                        best_val: float = float("inf")) -> None:
    """Checkpoint everything needed to resume: params, AdamW moments, RNG and report."""
    arrays = _state_arrays(params, opt)
    if best_params is not None:
        arrays.update({"best." + k: v for k, v in best_params.items()})
    extra = {
        "model": model_cfg.to_dict(),
        "optimizer": {k: getattr(opt, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "t")},
        "rng": rng.bit_generator.state,
        "report": dataclasses.asdict(report),
        "best_val": best_val,
    }
    ad.save_checkpoint(path, arrays, extra)


def load_training_state(path):
    arrays, extra = ad.load_checkpoint(path)
    model_cfg = mdl.ModelConfig.from_dict(extra["model"])
    names = list(mdl.param_shapes(model_cfg))
    params = {k: arrays[k].copy() for k in names}
    opt = ad.OptimizerState(**extra["optimizer"])
    for k in names:
        if "adam.m." + k in arrays:
            opt.m[k] = arrays["adam.m." + k].copy()
            opt.v[k] = arrays["adam.v." + k].copy()
    best = {k: arrays["best." + k].copy() for k in names} if "best." + names[0] in arrays else None
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng"]
    report = TrainReport(**extra["report"])
    return dict(params=params, opt=opt, model_cfg=model_cfg, rng=rng, report=report,
                best_params=best, best_val=extra["best_val"])


def save_params(path, params: dict, model_cfg: mdl.ModelConfig, rescale: dict | None = None) -> None:
    """Inference checkpoint: parameters, model config and optional rescaling metadata."""
    ad.save_checkpoint(path, params, {"model": model_cfg.to_dict(), "rescale": rescale})


def load_params(path):
    arrays, extra = ad.load_checkpoint(path)
    model_cfg = mdl.ModelConfig.from_dict(extra["model"])
    params = {k: arrays[k].copy() for k in arrays if not k.startswith(("adam.", "best."))}
    return params, model_cfg, extra.get("rescale")


def fit(model_cfg: mdl.ModelConfig, train_ds: Dataset, val_ds: Dataset, tcfg: TrainConfig,
        params: dict | None = None, resume_from=None, log_epochs: bool = False):
    """Train for ``tcfg.epochs`` epochs and return ``(best params, TrainReport)``.

    The best parameters are those with the lowest validation loss.  With
    ``resume_from`` (a training-state checkpoint) the run continues exactly
    where the checkpointed run stopped.
    """
    train_cache = FeatureCache(train_ds)
    val_cache = FeatureCache(val_ds)
    if resume_from is not None:
        st = load_training_state(resume_from)
        params, opt, rng, report = st["params"], st["opt"], st["rng"], st["report"]
        best_params, best_val = st["best_params"], st["best_val"]
    else:
        params = mdl.init_params(model_cfg, tcfg.seed) if params is None else {
            k: v.copy() for k, v in params.items()}
        opt = ad.OptimizerState(lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        rng = np.random.default_rng(tcfg.seed)
        report = TrainReport()
        best_params, best_val = {k: v.copy() for k, v in params.items()}, float("inf")
    start = len(report.train_loss)
    since_best = 0
    for epoch in range(start, tcfg.epochs):
        t0 = time.perf_counter()
        try:
            params, tr = train_epoch(params, train_cache, model_cfg, opt, tcfg, rng, epoch + 1)
        except NonFiniteLossError as exc:
            exc.report = report
            raise
        va = validate(params, val_cache, model_cfg)
        report.train_loss.append(tr)
        report.val_loss.append(va)
        report.seconds.append(time.perf_counter() - t0)
        if va < best_val:
            best_val = va
            best_params = {k: v.copy() for k, v in params.items()}
            report.best_epoch = epoch + 1
            since_best = 0
        else:
            since_best += 1
        if log_epochs:
            log.info("epoch %d  train %.6f  val %.6f  (%.1fs)", epoch + 1, tr, va, report.seconds[-1])
        if tcfg.checkpoint_path:
            save_training_state(tcfg.checkpoint_path, params, opt, model_cfg, report, rng,
                                best_params, best_val)
        if tcfg.early_stop_patience and since_best >= tcfg.early_stop_patience:
            break
    return best_params, report
