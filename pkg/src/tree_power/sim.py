"""Cell-free massive MIMO channel simulator.

Geometry, large-scale fading, local-scattering spatial correlation, MMSE
channel estimation, centralized MMSE combining and Monte-Carlo estimation
of the uplink/downlink effective SINR coefficients.

Array conventions
-----------------
* positions: ``(n, 2)`` float arrays in meters.
* per-link statistics: leading axes ``(L, K)``; matrices ``(L, K, N, N)``.
* collective channels: ``(..., K, L*N)`` with AP blocks stacked in AP order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

UL = "UL"
DL = "DL"


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class NetworkConfig:
    """Physical-layer constants of one network deployment.

    Defaults reproduce the simulation setup of the 500 m x 500 m scenario:
    16 APs with 4 antennas, 100 mW UL power per UE, 200 mW DL power per AP,
    a 200-symbol coherence block split 10/90/100 and -94 dBm noise.
    """

    area_side: float = 500.0
    L: int = 16
    N: int = 4
    K: int = 10
    tau_c: int = 200
    tau_p: int = 10
    tau_u: int = 90
    tau_d: int = 100
    P_ul_max: float = 0.1
    P_dl_max_per_ap: float = 0.2
    rho_pilot: float = 0.1
    noise_power: float = dbm_to_watt(-94.0)
    carrier_ghz: float = 2.0
    pathloss_exp_db_per_decade: float = 36.7
    pathloss_intercept_db: float = -30.5
    shadow_var_db: float = 4.0
    height_diff: float = 10.0
    asd_deg: float = 10.0
    mc_realizations: int = 200
    correlation: str = "local_scattering"
    max_dim: int = 1024

    def __post_init__(self):
        for name in ("area_side", "P_ul_max", "P_dl_max_per_ap", "rho_pilot",
                     "noise_power", "carrier_ghz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"NetworkConfig.{name} must be positive, got {getattr(self, name)!r}")
        for name in ("L", "N", "K", "tau_c", "tau_p", "tau_u", "tau_d", "mc_realizations"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"NetworkConfig.{name} must be a positive integer, got {value!r}")
        if self.tau_c < self.tau_p + self.tau_u + self.tau_d:
            raise ValueError("NetworkConfig: tau_c must be >= tau_p + tau_u + tau_d")
        if self.shadow_var_db < 0 or self.asd_deg < 0 or self.height_diff < 0:
            raise ValueError("NetworkConfig: shadow_var_db, asd_deg and height_diff must be >= 0")
        if self.correlation not in ("local_scattering", "identity"):
            raise ValueError(f"NetworkConfig.correlation must be 'local_scattering' or 'identity', "
                             f"got {self.correlation!r}")
        if self.N * self.L > self.max_dim:
            raise ValueError(f"NetworkConfig: N*L = {self.N * self.L} exceeds max_dim = {self.max_dim}")

    @property
    def total_dl_budget(self) -> float:
        return self.L * self.P_dl_max_per_ap

    def replace(self, **changes) -> "NetworkConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"NetworkConfig: unknown fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class ChannelStats:
    """Second-order statistics of every AP-UE link.

    ``R`` is the normalized spatial correlation (trace N); the channel
    covariance of link (l, k) is ``beta[l, k] * R[l, k]``.  ``Q`` and ``Phi``
    are built on that covariance: ``Q = beta R + sigma^2/(tau_p rho) I`` and
    ``Phi = (beta R) Q^-1 (beta R)`` is the covariance of the MMSE estimate.
    """

    beta: np.ndarray
    R: np.ndarray
    Phi: np.ndarray
    Q: np.ndarray
    R_sqrt: np.ndarray = field(repr=False)
    est_gain: np.ndarray = field(repr=False)  # (beta R) Q^-1

    @property
    def L(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def N(self) -> int:
        return self.R.shape[-1]

    @property
    def error_cov(self) -> np.ndarray:
        """Estimation-error covariance ``beta R - Phi`` per link."""
        return self.beta[..., None, None] * self.R - self.Phi


@dataclass
class ChannelMoments:
    """Effective-SINR coefficients for one link direction.

    ``a[k]`` is the squared mean useful gain, ``B[k, i]`` the second moment
    of the gain seen by user k from stream i and ``c[k]`` the noise term.
    The ``*_se`` arrays are Monte-Carlo standard errors (zero when the
    moments were computed from a single deterministic realization).
    """

    side: str
    a: np.ndarray
    B: np.ndarray
    c: np.ndarray
    a_se: np.ndarray | None = None
    B_se: np.ndarray | None = None
    c_se: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.a.shape[0]


# --------------------------------------------------------------------------
# geometry and large-scale fading
# --------------------------------------------------------------------------

def generate_layout(cfg: NetworkConfig, rng: np.random.Generator, K: int | None = None,
                    L: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform AP and UE positions in the square coverage area.

    Returns ``(ap, ue)`` with shapes ``(L, 2)`` and ``(K, 2)``.
    """
    K = cfg.K if K is None else K
    L = cfg.L if L is None else L
    ap = rng.uniform(0.0, cfg.area_side, size=(L, 2))
    ue = rng.uniform(0.0, cfg.area_side, size=(K, 2))
    return ap, ue


def pathloss_linear(d3d, cfg: NetworkConfig, shadow_db=0.0):
    """Large-scale fading gain for 3D distance ``d3d`` (meters).

    ``10**((intercept - slope*log10(d3d) + shadow_db)/10)`` with the 2 GHz
    intercept of -30.5 dB and 36.7 dB per decade.
    """
    d3d = np.asarray(d3d, dtype=float)
    if np.any(d3d <= 0):
        raise ValueError("pathloss_linear: distance must be positive")
    gain_db = (cfg.pathloss_intercept_db
               - cfg.pathloss_exp_db_per_decade * np.log10(d3d)
               + np.asarray(shadow_db, dtype=float))
    out = 10.0 ** (gain_db / 10.0)
    return float(out) if out.ndim == 0 else out


def _hermgauss_normal(n: int = 64):
    # nodes/weights for E[f(X)], X ~ N(0, 1)
    x, w = np.polynomial.hermite.hermgauss(n)
    return x * math.sqrt(2.0), w / math.sqrt(math.pi)


_GH_NODES, _GH_WEIGHTS = _hermgauss_normal()


def correlation_matrix(nominal_angle, asd_deg: float, N: int) -> np.ndarray:
    """Local-scattering spatial correlation of a half-wavelength ULA.

    ``R[m, n] = E[exp(j*pi*(m-n)*sin(theta + delta))]`` with
    ``delta ~ N(0, asd^2)``, evaluated with Gauss-Hermite quadrature.
    Accepts a scalar angle (returns ``(N, N)``) or an array of angles
    (returns ``angles.shape + (N, N)``).  The diagonal is exactly one, so
    ``trace(R) = N``.
    """
    if N < 1:
        raise ValueError("correlation_matrix: N must be >= 1")
    theta = np.asarray(nominal_angle, dtype=float)
    sigma = math.radians(asd_deg)
    diff = np.arange(N)[:, None] - np.arange(N)[None, :]
    phases = np.sin(theta[..., None] + sigma * _GH_NODES)  # (..., G)
    terms = np.exp(1j * math.pi * diff[..., None] * phases[..., None, None, :])
    R = terms @ _GH_WEIGHTS if sigma > 0 else terms[..., 0]
    idx = np.arange(N)
    R[..., idx, idx] = 1.0
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


def _psd_sqrt(R: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    w, U = np.linalg.eigh(R)
    scale = np.maximum(np.max(np.abs(w), axis=-1, keepdims=True), 1.0)
    if np.any(w < -1e-8 * scale):
        raise np.linalg.LinAlgError("matrix square root: correlation matrix is not PSD")
    w = np.where(w < tol, 0.0, w)
    return (U * np.sqrt(w)[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


def build_stats(beta: np.ndarray, R: np.ndarray, cfg: NetworkConfig) -> ChannelStats:
    """Assemble ``ChannelStats`` from gains ``(L, K)`` and correlations ``(L, K, N, N)``."""
    beta = np.asarray(beta, dtype=float)
    R = np.asarray(R, dtype=complex)
    N = R.shape[-1]
    cov = beta[..., None, None] * R
    Q = cov + (cfg.noise_power / (cfg.tau_p * cfg.rho_pilot)) * np.eye(N)
    # cov Q^-1 via a solve on the Hermitian pair: (Q^-1 cov)^H = cov Q^-1
    est_gain = np.conj(np.swapaxes(np.linalg.solve(Q, cov), -1, -2))
    Phi = est_gain @ cov
    Phi = 0.5 * (Phi + np.conj(np.swapaxes(Phi, -1, -2)))
    return ChannelStats(beta=beta, R=R, Phi=Phi, Q=Q, R_sqrt=_psd_sqrt(R), est_gain=est_gain)


def channel_statistics(ap: np.ndarray, ue: np.ndarray, cfg: NetworkConfig,
                       rng: np.random.Generator) -> ChannelStats:
    """Large-scale fading with i.i.d. log-normal shadowing and per-link correlation."""
    ap = np.asarray(ap, dtype=float)
    ue = np.asarray(ue, dtype=float)
    delta = ue[None, :, :] - ap[:, None, :]  # (L, K, 2)
    d2d = np.hypot(delta[..., 0], delta[..., 1])
    d3d = np.sqrt(d2d**2 + cfg.height_diff**2)
    shadow = rng.normal(0.0, math.sqrt(cfg.shadow_var_db), size=d2d.shape)
    beta = pathloss_linear(d3d, cfg, shadow)
    N = cfg.N
    if cfg.correlation == "identity":
        R = np.broadcast_to(np.eye(N, dtype=complex), d2d.shape + (N, N)).copy()
    else:
        angle = np.arctan2(delta[..., 1], delta[..., 0])
        R = correlation_matrix(angle, cfg.asd_deg, N)
    return build_stats(np.atleast_2d(beta), R, cfg)


# --------------------------------------------------------------------------
# small-scale fading and estimation
# --------------------------------------------------------------------------

def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def _stack(blocks: np.ndarray) -> np.ndarray:
    # (..., L, K, N) -> (..., K, L*N)
    blocks = np.swapaxes(blocks, -3, -2)
    return blocks.reshape(blocks.shape[:-2] + (-1,))


def _unstack(h: np.ndarray, L: int, N: int) -> np.ndarray:
    # (..., K, L*N) -> (..., L, K, N)
    blocks = h.reshape(h.shape[:-1] + (L, N))
    return np.swapaxes(blocks, -3, -2)


def draw_channel(stats: ChannelStats, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Collective channels ``h_k``: ``(K, L*N)`` or ``(n, K, L*N)`` if ``n`` is given."""
    lead = () if n is None else (n,)
    g = _cn(rng, lead + (stats.L, stats.K, stats.N))
    blocks = np.sqrt(stats.beta)[..., None] * np.einsum("lkij,...lkj->...lki", stats.R_sqrt, g)
    return _stack(blocks)


def mmse_estimate(h: np.ndarray, stats: ChannelStats, cfg: NetworkConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """MMSE estimates from the despread pilot observation of ``h``.

    ``h_hat_lk = (beta R) Q^-1 (h_lk + n_lk / sqrt(tau_p rho))`` with
    ``n ~ CN(0, sigma^2 I)``, so that ``h_hat_lk ~ CN(0, Phi_lk)``.
    ``h`` has shape ``(..., K, L*N)``.
    """
    h = np.asarray(h)
    noise = _cn(rng, h.shape) * math.sqrt(cfg.noise_power / (cfg.tau_p * cfg.rho_pilot))
    y = _unstack(h + noise, stats.L, stats.N)
    est = np.einsum("lkij,...lkj->...lki", stats.est_gain, y)
    return _stack(est)


def _error_cov_sum(stats: ChannelStats, p_ul: np.ndarray, cfg: NetworkConfig) -> np.ndarray:
    """``Z = sum_i p_i (blockdiag(beta R_i) - Phi_i) + sigma^2 I``."""
    L, N = stats.L, stats.N
    weighted = np.einsum("k,lkij->lij", np.asarray(p_ul, dtype=float), stats.error_cov)
    Z = np.zeros((L * N, L * N), dtype=complex)
    for l in range(L):
        Z[l * N:(l + 1) * N, l * N:(l + 1) * N] = weighted[l]
    Z += cfg.noise_power * np.eye(L * N)
    return Z


def mmse_combiner(h_hat_all: np.ndarray, p_ul, stats: ChannelStats, cfg: NetworkConfig) -> np.ndarray:
    """Centralized MMSE combiners for one realization.

    ``h_hat_all`` is ``(K, L*N)``; returns ``V`` of the same shape with
    ``V[k] = (sum_i p_i h_hat_i h_hat_i^H + Z)^-1 h_hat_k``.
    """
    import scipy.linalg

    p_ul = np.asarray(p_ul, dtype=float)
    if np.any(p_ul < 0):
        raise ValueError("mmse_combiner: powers must be non-negative")
    Hh = np.asarray(h_hat_all)
    A = (Hh.T * p_ul) @ Hh.conj() + _error_cov_sum(stats, p_ul, cfg)
    factor = scipy.linalg.cho_factor(A, lower=True)
    return scipy.linalg.cho_solve(factor, Hh.T).T


def _batched_combiners(H_hat: np.ndarray, p_ul: np.ndarray, Z: np.ndarray) -> np.ndarray:
    # H_hat (m, K, M) -> V (m, M, K); Cholesky then two triangular solves
    A = np.einsum("mki,k,mkj->mij", H_hat, p_ul, H_hat.conj()) + Z
    chol = np.linalg.cholesky(A)
    y = np.linalg.solve(chol, np.swapaxes(H_hat, -1, -2))
    return np.linalg.solve(np.conj(np.swapaxes(chol, -1, -2)), y)


def moments_from_realizations(side: str, H: np.ndarray, H_hat: np.ndarray, p_ul,
                              stats: ChannelStats, cfg: NetworkConfig,
                              error_cov: np.ndarray | None = None,
                              chunk: int = 4096) -> ChannelMoments:
    """SINR coefficients averaged over given realizations.

    ``H`` and ``H_hat`` are ``(m, K, L*N)``.  The combiners are the MMSE
    combiners built with UL powers ``p_ul``; the DL precoders are their
    unit-norm versions.  ``error_cov`` overrides the ``(L, K, N, N)``
    estimation-error covariances entering ``Z`` (pass zeros for perfect CSI).
    """
    if side not in (UL, DL):
        raise ValueError(f"side must be {UL!r} or {DL!r}")
    p_ul = np.asarray(p_ul, dtype=float)
    if error_cov is None:
        Z = _error_cov_sum(stats, p_ul, cfg)
    else:
        shadow = dataclasses.replace(stats, Phi=stats.beta[..., None, None] * stats.R - error_cov)
        Z = _error_cov_sum(shadow, p_ul, cfg)
    m, K, _ = H.shape
    g_sum = np.zeros(K, dtype=complex)
    g_sq = np.zeros(K)
    B_sum = np.zeros((K, K))
    B_sq = np.zeros((K, K))
    v_sum = np.zeros(K)
    v_sq = np.zeros(K)
    for start in range(0, m, chunk):
        Hc = H[start:start + chunk]
        V = _batched_combiners(H_hat[start:start + chunk], p_ul, Z)  # (c, M, K)
        vnorm2 = np.sum(np.abs(V) ** 2, axis=1)  # (c, K)
        if side == UL:
            G = np.einsum("mnk,min->mki", V.conj(), Hc)  # v_k^H h_i
        else:
            W = V / np.sqrt(vnorm2)[:, None, :]
            G = np.einsum("mkn,mni->mki", Hc.conj(), W)  # h_k^H w_i
        diag = np.einsum("mkk->mk", G)
        P = np.abs(G) ** 2
        g_sum += diag.sum(axis=0)
        g_sq += (np.abs(diag) ** 2).sum(axis=0)
        B_sum += P.sum(axis=0)
        B_sq += (P ** 2).sum(axis=0)
        v_sum += vnorm2.sum(axis=0)
        v_sq += (vnorm2 ** 2).sum(axis=0)

    def se(total, total_sq, mean):
        if m < 2:
            return np.zeros_like(mean, dtype=float)
        var = np.maximum(total_sq / m - np.abs(mean) ** 2, 0.0) * m / (m - 1)
        return np.sqrt(var / m)

    g_mean = g_sum / m
    B = B_sum / m
    a = np.abs(g_mean) ** 2
    a_se = 2.0 * np.abs(g_mean) * se(g_sum, g_sq, g_mean)
    B_se = se(B_sum, B_sq, B)
    if side == UL:
        v_mean = v_sum / m
        c = cfg.noise_power * v_mean
        c_se = cfg.noise_power * se(v_sum, v_sq, v_mean)
    else:
        c = np.full(K, cfg.noise_power)
        c_se = np.zeros(K)
    return ChannelMoments(side=side, a=a, B=B, c=c, a_se=a_se, B_se=B_se, c_se=c_se)


def draw_realizations(stats: ChannelStats, cfg: NetworkConfig, rng: np.random.Generator,
                      n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """``n`` (default ``cfg.mc_realizations``) joint draws of ``(h, h_hat)``."""
    n = cfg.mc_realizations if n is None else n
    H = draw_channel(stats, rng, n)
    return H, mmse_estimate(H, stats, cfg, rng)


def estimate_moments(side: str, stats: ChannelStats, p_ul, cfg: NetworkConfig,
                     rng: np.random.Generator) -> ChannelMoments:
    """Monte-Carlo SINR coefficients over ``cfg.mc_realizations`` fresh draws."""
    H, H_hat = draw_realizations(stats, cfg, rng)
    return moments_from_realizations(side, H, H_hat, p_ul, stats, cfg)


# --------------------------------------------------------------------------
# SINR and spectral efficiency
# --------------------------------------------------------------------------

def sinr(side: str, moments: ChannelMoments, p) -> np.ndarray:
    """Effective SINR ``p_k a_k / (sum_i p_i B_ki - p_k a_k + c_k)``."""
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise ValueError("sinr: powers must be non-negative")
    signal = p * moments.a
    denom = moments.B @ p - signal + moments.c
    if np.any(denom <= 0):
        raise ZeroDivisionError("sinr: zero interference-plus-noise term (c_k = 0 with zero power)")
    return signal / denom


def prelog(side: str, cfg: NetworkConfig) -> float:
    if side == UL:
        return cfg.tau_u / cfg.tau_c
    if side == DL:
        return cfg.tau_d / cfg.tau_c
    raise ValueError(f"side must be {UL!r} or {DL!r}")


def se(side: str, sinr_k, cfg: NetworkConfig):
    """Spectral efficiency in b/s/Hz with the TDD prelog of ``side``."""
    sinr_k = np.asarray(sinr_k, dtype=float)
    if np.any(sinr_k < 0):
        raise ValueError("se: SINR must be non-negative")
    out = prelog(side, cfg) * np.log2(1.0 + sinr_k)
    return float(out) if out.ndim == 0 else out
