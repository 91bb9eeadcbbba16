"""Mean + spike + tail split of an activation matrix and outlier attribution.

``X = 1 mu^T + X_spike + X_tail`` where ``mu`` is the column mean, ``X_spike``
is the rank-k truncated SVD of the centered matrix and ``X_tail`` is what is
left. Spike and tail both have zero column means, so the three parts are
Frobenius-orthogonal and their energies add up to ``||X||_F^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linalg import ContractError, TruncatedSvd, as_matrix, center, truncated_svd
from .rng import make_rng


def default_rank(m: int) -> int:
    """``floor(0.01 m)``, raised to 1 for narrow matrices."""
    return max(1, math.floor(0.01 * m))


@dataclass
class Decomposition:
    mean_vector: np.ndarray
    spike: TruncatedSvd
    k: int
    mean_energy: float
    spike_energy: float
    tail_energy: float
    total_energy: float
    shape: tuple
    rank_note: str = ""

    @property
    def mean_share(self) -> float:
        return self.mean_energy / self.total_energy if self.total_energy else 0.0

    @property
    def spike_share(self) -> float:
        return self.spike_energy / self.total_energy if self.total_energy else 0.0

    @property
    def tail_share(self) -> float:
        return self.tail_energy / self.total_energy if self.total_energy else 0.0

    def mean_matrix(self) -> np.ndarray:
        return np.broadcast_to(self.mean_vector, self.shape).copy()

    def spike_matrix(self) -> np.ndarray:
        return self.spike.reconstruct()

    def tail_matrix(self, x) -> np.ndarray:
        return center(x) - self.spike_matrix()

    def summary(self) -> dict:
        return {
            "shape": list(self.shape),
            "k": self.k,
            "rank_note": self.rank_note,
            "total_energy": self.total_energy,
            "mean_energy": self.mean_energy,
            "spike_energy": self.spike_energy,
            "tail_energy": self.tail_energy,
            "mean_share": self.mean_share,
            "spike_share": self.spike_share,
            "tail_share": self.tail_share,
            "energy_identity_residual": abs(
                self.total_energy - self.mean_energy - self.spike_energy - self.tail_energy
            ),
            "spike_singular_values": self.spike.s.tolist(),
            "mean_vector_norm": float(np.linalg.norm(self.mean_vector)),
        }


def decompose(x, k: int | None = None, seed: int = 0) -> Decomposition:
    x = as_matrix(x, "x")
    l, m = x.shape
    if l < 2 or m < 2:
        raise ContractError(f"decompose: need at least a 2x2 matrix, got {x.shape}")
    note = ""
    if k is None:
        k = default_rank(m)
        if math.floor(0.01 * m) == 0:
            note = f"floor(0.01*m)=0 for m={m}; using k=1"
    if not 1 <= k <= min(l, m):
        raise ContractError(f"decompose: k={k} outside [1, {min(l, m)}]")

    mu = x.mean(axis=0)
    xc = center(x)
    svd = truncated_svd(xc, k, seed=seed)
    spike = svd.reconstruct()
    tail = xc - spike

    return Decomposition(
        mean_vector=mu,
        spike=svd,
        k=k,
        mean_energy=float(l * np.dot(mu, mu)),
        spike_energy=float(np.sum(spike * spike)),
        tail_energy=float(np.sum(tail * tail)),
        total_energy=float(np.sum(x * x)),
        shape=x.shape,
        rank_note=note,
    )


@dataclass
class AttributionReport:
    outlier_indices: np.ndarray  # (n, 2) int rows of (i, j)
    values: np.ndarray
    rho_mean: np.ndarray
    rho_spike: np.ndarray
    rho_tail: np.ndarray
    requested: int = 0
    aggregate: dict = field(default_factory=dict)

    @property
    def cross_terms(self) -> np.ndarray:
        """Per-entry ``1 - (rho_mean + rho_spike + rho_tail)``, i.e. the normalized cross terms."""
        return 1.0 - (self.rho_mean + self.rho_spike + self.rho_tail)

    def rows(self) -> list[dict]:
        return [
            {
                "i": int(i),
                "j": int(j),
                "value": float(v),
                "rho_mean": float(a),
                "rho_spike": float(b),
                "rho_tail": float(c),
                "cross_term": float(d),
            }
            for (i, j), v, a, b, c, d in zip(
                self.outlier_indices,
                self.values,
                self.rho_mean,
                self.rho_spike,
                self.rho_tail,
                self.cross_terms,
            )
        ]


def outlier_count(l: int, m: int) -> int:
    return max(1, math.floor(0.001 * l * m))


def attribute_outliers(x, d: Decomposition) -> AttributionReport:
    """Squared-magnitude shares of mean, spike and tail on the top 0.1% entries.

    Entries are ranked by ``|X_ij|`` descending with ties broken by ``(i, j)``.
    Exact zeros never enter the outlier set since their shares are undefined.
    """
    x = as_matrix(x, "x")
    if x.shape != tuple(d.shape):
        raise ContractError(f"attribute_outliers: shape {x.shape} != decomposition {d.shape}")
    l, m = x.shape
    n_req = outlier_count(l, m)

    mags = np.abs(x).reshape(-1)
    nonzero = np.flatnonzero(mags > 0)
    # lexsort keys: last is primary. Flat index order equals (i, j) order.
    order = nonzero[np.lexsort((nonzero, -mags[nonzero]))]
    top = order[:n_req]
    ii, jj = np.divmod(top, m)

    vals = x[ii, jj]
    mean_part = d.mean_vector[jj]
    spike_part = np.einsum("nk,k,nk->n", d.spike.u[ii], d.spike.s, d.spike.v[jj])
    tail_part = (vals - mean_part) - spike_part
    denom = vals * vals

    rho_m = mean_part**2 / denom
    rho_s = spike_part**2 / denom
    rho_t = tail_part**2 / denom
    cross = 1.0 - (rho_m + rho_s + rho_t)

    aggregate = {
        "count": int(top.size),
        "requested": n_req,
        "rho_mean": float(rho_m.mean()) if top.size else 0.0,
        "rho_spike": float(rho_s.mean()) if top.size else 0.0,
        "rho_tail": float(rho_t.mean()) if top.size else 0.0,
        "cross_term_abs_mean": float(np.abs(cross).mean()) if top.size else 0.0,
        "cross_term_abs_max": float(np.abs(cross).max()) if top.size else 0.0,
    }
    return AttributionReport(
        outlier_indices=np.stack([ii, jj], axis=1),
        values=vals,
        rho_mean=rho_m,
        rho_spike=rho_s,
        rho_tail=rho_t,
        requested=n_req,
        aggregate=aggregate,
    )


@dataclass
class MeanDiagnostics:
    r_ratio: float
    projection_sign_fraction: float
    alpha: np.ndarray
    cos_mu_v1: float
    cos_mu_v1_centered: float | None = None

    def summary(self) -> dict:
        return {
            "r_ratio": self.r_ratio,
            "projection_sign_fraction": self.projection_sign_fraction,
            "alpha": self.alpha.tolist(),
            "cos_mu_v1": self.cos_mu_v1,
            "cos_mu_v1_centered": self.cos_mu_v1_centered,
        }


def r_ratio(x) -> float:
    """``||mu|| / sqrt(mean squared token norm)``."""
    x = as_matrix(x, "x")
    mu = x.mean(axis=0)
    rms = math.sqrt(float(np.sum(x * x)) / x.shape[0])
    return float(np.linalg.norm(mu) / rms) if rms > 0 else 0.0


def mean_diagnostics(
    x,
    svd: TruncatedSvd | None = None,
    k: int = 1,
    seed: int = 0,
    centered_svd: TruncatedSvd | None = None,
) -> MeanDiagnostics:
    """Mean-bias statistics of ``x``.

    ``svd`` must be an SVD of the *uncentered* ``x``; the expansion
    ``mu = sum_i alpha_i v_i`` with ``alpha_i = (s_i / l) u_i^T 1`` only holds
    there (centered left vectors are orthogonal to ``1``). When omitted it is
    computed at rank ``k``. ``centered_svd``, if given, adds the cosine
    against the leading direction of the centered matrix for comparison.
    """
    x = as_matrix(x, "x")
    l = x.shape[0]
    if svd is None:
        svd = truncated_svd(x, k, seed=seed)

    mu = x.mean(axis=0)
    mu_norm = float(np.linalg.norm(mu))
    if mu_norm > 0:
        mu_hat = mu / mu_norm
        p = x @ mu_hat
        pos = np.count_nonzero(p > 0)
        frac = max(pos, l - pos) / l
        cos = float(min(1.0, abs(float(mu_hat @ svd.v[:, 0]))))
        cos_c = None
        if centered_svd is not None:
            cos_c = float(min(1.0, abs(float(mu_hat @ centered_svd.v[:, 0]))))
    else:
        frac, cos, cos_c = 0.5, 0.0, (0.0 if centered_svd is not None else None)

    alpha = svd.s / l * svd.u.sum(axis=0)
    return MeanDiagnostics(
        r_ratio=r_ratio(x),
        projection_sign_fraction=float(frac),
        alpha=alpha,
        cos_mu_v1=cos,
        cos_mu_v1_centered=cos_c,
    )


def anisotropic_activations(
    l: int = 1024,
    m: int = 256,
    loading_mean: float = 8.0,
    loading_std: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Synthetic activations with a dominant, sign-coherent leading direction.

    Each token is ``a_i v + noise`` with a shared unit direction ``v`` and
    loadings ``a_i ~ N(loading_mean, loading_std)``. A large positive loading
    mean gives both a dominant first singular value and little sign
    cancellation in the leading left singular vector.
    """
    rng = make_rng(seed, 0xA15)
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    a = rng.normal(loading_mean, loading_std, size=l)
    return np.outer(a, v) + noise * rng.standard_normal((l, m))
