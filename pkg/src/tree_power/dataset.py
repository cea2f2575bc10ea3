"""Labeled scenario generation, normalization and JSON Lines persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle, sim
from .sim import NetworkConfig

log = logging.getLogger(__name__)

MAGIC = "TTDS"
FORMAT_VERSION = 1
EPSILON = 1e-12
POSITION_SCALINGS = ("per_kind", "joint")
JITTER_SIGMA = 5.0

# SeedSequence children of a sample seed
_LAYOUT, _SHADOW, _MC, _JITTER, _EVAL = range(5)


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class SampleGenerationError(RuntimeError):
    pass


@dataclass
class Sample:
    K: int
    L: int
    seed: int
    ue_true: np.ndarray
    ue_jittered: np.ndarray
    ap: np.ndarray
    ap_jittered: np.ndarray
    p_ul_opt: np.ndarray
    p_dl_opt: np.ndarray
    min_se_ul: float = float("nan")
    min_se_dl: float = float("nan")

    def to_json(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        kw = dict(d)
        for name in ("ue_true", "ue_jittered", "ap", "ap_jittered"):
            kw[name] = np.asarray(kw[name], dtype=float).reshape(-1, 2)
        for name in ("p_ul_opt", "p_dl_opt"):
            kw[name] = np.asarray(kw[name], dtype=float)
        return cls(**kw)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        for f in dataclasses.fields(self):
            x, y = getattr(self, f.name), getattr(other, f.name)
            if isinstance(x, np.ndarray):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
            elif not (x == y or (isinstance(x, float) and np.isnan(x) and np.isnan(y))):
                return False
        return True


@dataclass
class NormalizationMeta:
    p_ul_min: float
    p_ul_max: float
    p_dl_min: float
    p_dl_max: float
    epsilon: float = EPSILON
    position_scaling: str = "per_kind"

    def __post_init__(self):
        if self.p_ul_max < self.p_ul_min or self.p_dl_max < self.p_dl_min:
            raise ValueError("NormalizationMeta: max must be >= min")
        if not self.epsilon > 0:
            raise ValueError("NormalizationMeta: epsilon must be positive")
        if self.position_scaling not in POSITION_SCALINGS:
            raise ValueError(f"NormalizationMeta: position_scaling must be one of {POSITION_SCALINGS}")

    @classmethod
    def from_samples(cls, samples, epsilon: float = EPSILON,
                     position_scaling: str = "per_kind") -> "NormalizationMeta":
        ul = np.concatenate([s.p_ul_opt for s in samples])
        dl = np.concatenate([s.p_dl_opt for s in samples])
        return cls(float(ul.min()), float(ul.max()), float(dl.min()), float(dl.max()), epsilon,
                   position_scaling)


@dataclass
class Dataset:
    samples: list
    meta: NormalizationMeta
    split_tag: str = "train"
    plan: list = field(default_factory=list)
    cfg: NetworkConfig | None = None
    n_failed: int = 0

    def __post_init__(self):
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"unknown split_tag {self.split_tag!r}")

    def __len__(self):
        return len(self.samples)

    def subset(self, indices, split_tag: str | None = None) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.meta,
                       split_tag or self.split_tag, self.plan, self.cfg)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.samples == other.samples and self.meta == other.meta
                and self.split_tag == other.split_tag
                and [list(p) for p in self.plan] == [list(p) for p in other.plan]
                and self.cfg == other.cfg)


# --------------------------------------------------------------------------
# seeds
# --------------------------------------------------------------------------

def sample_seed(base_seed: int, K: int, L: int, index: int) -> int:
    """``base_seed XOR blake2b64(K, L, index)``."""
    digest = hashlib.blake2b(f"{K}/{L}/{index}".encode(), digest_size=8).digest()
    return (int(base_seed) ^ int.from_bytes(digest, "little")) & 0xFFFF_FFFF_FFFF_FFFF


def sample_rngs(seed: int) -> list:
    children = np.random.SeedSequence(seed).spawn(5)
    return [np.random.default_rng(c) for c in children]


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def jitter(positions, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add independent ``N(0, sigma^2)`` noise to every coordinate."""
    if sigma < 0:
        raise ValueError("jitter: sigma must be >= 0")
    positions = np.asarray(positions, dtype=float)
    noise = rng.normal(0.0, 1.0, size=positions.shape)
    return positions + sigma * noise


def scenario_stats(sample: Sample, cfg: NetworkConfig) -> sim.ChannelStats:
    """Rebuild the channel statistics (including shadowing) of a sample."""
    rngs = sample_rngs(sample.seed)
    return sim.channel_statistics(sample.ap, sample.ue_true, cfg.replace(K=sample.K, L=sample.L),
                                  rngs[_SHADOW])


def generate_sample(cfg: NetworkConfig, seed: int, jitter_sigma: float = JITTER_SIGMA,
                    jitter_aps: bool = False, alternations: int = 2) -> Sample:
    """One scenario of ``cfg.K`` UEs and ``cfg.L`` APs with max-min labels."""
    rngs = sample_rngs(seed)
    ap, ue = sim.generate_layout(cfg, rngs[_LAYOUT])
    stats = sim.channel_statistics(ap, ue, cfg, rngs[_SHADOW])
    sol = oracle.solve_scenario(stats, cfg, rngs[_MC], alternations=alternations)
    if not (sol.ul.converged and sol.dl.converged):
        raise SampleGenerationError(f"oracle did not converge for seed {seed}")
    ue_j = jitter(ue, jitter_sigma, rngs[_JITTER])
    ap_j = jitter(ap, jitter_sigma, rngs[_JITTER]) if jitter_aps else ap.copy()
    return Sample(K=cfg.K, L=cfg.L, seed=int(seed), ue_true=ue, ue_jittered=ue_j, ap=ap,
                  ap_jittered=ap_j, p_ul_opt=sol.ul.p, p_dl_opt=sol.dl.p,
                  min_se_ul=float(sol.ul.min_se), min_se_dl=float(sol.dl.min_se))


def build_corpus(plan, cfg: NetworkConfig, base_seed: int, split_tag: str = "train",
                 jitter_sigma: float = JITTER_SIGMA, jitter_aps: bool = False,
                 alternations: int = 2, position_scaling: str = "per_kind") -> Dataset:
    """Generate every ``(K, L, count)`` group of ``plan`` and normalize globally."""
    plan = [tuple(int(x) for x in p) for p in plan]
    if not plan:
        raise ValueError("build_corpus: empty plan")
    for K, L, count in plan:
        if K < 1 or L < 1 or count < 1:
            raise ValueError(f"build_corpus: invalid plan entry (K={K}, L={L}, count={count})")
    samples = []
    failed = 0
    for K, L, count in plan:
        group_cfg = cfg.replace(K=K, L=L)
        for i in range(count):
            seed = sample_seed(base_seed, K, L, i)
            try:
                samples.append(generate_sample(group_cfg, seed, jitter_sigma, jitter_aps, alternations))
            except SampleGenerationError as exc:
                failed += 1
                log.warning("excluded sample: %s", exc)
    if failed:
        log.info("build_corpus: %d samples excluded after oracle failure", failed)
    if not samples:
        raise SampleGenerationError("build_corpus: every sample failed")
    return Dataset(samples, NormalizationMeta.from_samples(samples, position_scaling=position_scaling), split_tag, [list(p) for p in plan],
                   cfg, n_failed=failed)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

def minmax_normalize(values, vmin: float, vmax: float, epsilon: float = EPSILON) -> np.ndarray:
    """``(x - min) / (max - min + epsilon)``."""
    if vmax < vmin:
        raise ValueError("minmax_normalize: max < min")
    return (np.asarray(values, dtype=float) - vmin) / (vmax - vmin + epsilon)


def minmax_denormalize(values, vmin: float, vmax: float, epsilon: float = EPSILON) -> np.ndarray:
    return np.asarray(values, dtype=float) * (vmax - vmin + epsilon) + vmin


def normalize_positions(pos, epsilon: float = EPSILON) -> np.ndarray:
    """Per-axis min-max scaling across the rows of ``pos`` ``(n, 2)``."""
    pos = np.asarray(pos, dtype=float)
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    return (pos - lo) / (hi - lo + epsilon)


def sample_features(sample: Sample, meta: NormalizationMeta):
    """Model inputs and normalized targets: ``(ap (L, 2), ue (K, 2), target (K, 2))``.

    Positions are min-max scaled per axis within the sample, separately for
    APs and UEs (``"per_kind"``) or over both kinds at once (``"joint"``),
    as selected by ``meta.position_scaling``.
    """
    if meta.position_scaling == "joint":
        # one per-axis box over APs and UEs together keeps their relative geometry
        both = normalize_positions(np.vstack([sample.ap_jittered, sample.ue_jittered]), meta.epsilon)
        ap, ue = both[:sample.L], both[sample.L:]
    else:
        ap = normalize_positions(sample.ap_jittered, meta.epsilon)
        ue = normalize_positions(sample.ue_jittered, meta.epsilon)
    target = np.stack([
        minmax_normalize(sample.p_ul_opt, meta.p_ul_min, meta.p_ul_max, meta.epsilon),
        minmax_normalize(sample.p_dl_opt, meta.p_dl_min, meta.p_dl_max, meta.epsilon),
    ], axis=-1)
    return ap, ue, target


def stratified_split(ds: Dataset, val_fraction: float, rng: np.random.Generator):
    """Split into ``(train, val)`` keeping the per-(K, L) proportions."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    groups: dict = {}
    for i, s in enumerate(ds.samples):
        groups.setdefault((s.K, s.L), []).append(i)
    train_idx, val_idx = [], []
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        n_val = int(round(val_fraction * len(idx)))
        if len(idx) > 1:
            n_val = min(max(n_val, 1), len(idx) - 1)
        else:
            n_val = 0
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    return ds.subset(sorted(train_idx), "train"), ds.subset(sorted(val_idx), "val")


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def save(ds: Dataset, path) -> None:
    header = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "n_samples": len(ds.samples),
        "split_tag": ds.split_tag,
        "plan": [list(p) for p in ds.plan],
        "meta": dataclasses.asdict(ds.meta),
        "cfg": ds.cfg.to_dict() if ds.cfg is not None else None,
        "n_failed": ds.n_failed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in ds.samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def load(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"{path}: header is not JSON") from exc
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset file (bad magic)")
        if header.get("format_version") != FORMAT_VERSION:
            raise DatasetVersionError(f"{path}: format_version {header.get('format_version')!r}, "
                                      f"expected {FORMAT_VERSION}")
        samples = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            if not line.endswith("\n"):
                raise DatasetTruncatedError(f"{path}: line {lineno} is incomplete")
            try:
                samples.append(Sample.from_json(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                raise DatasetFormatError(f"{path}: malformed sample on line {lineno}") from exc
    expected = header.get("n_samples")
    if len(samples) != expected:
        raise DatasetTruncatedError(f"{path}: header announces {expected} samples, found {len(samples)}")
    cfg = NetworkConfig.from_dict(header["cfg"]) if header.get("cfg") else None
    return Dataset(samples, NormalizationMeta(**header["meta"]), header["split_tag"],
                   header.get("plan", []), cfg, n_failed=header.get("n_failed", 0))
