"""Batched posterior statistics over rows and quadrature nodes.

Each row contributes, at every node ``g``, a normalized weight
``omega[t, g] = m(y_t, node g) w_g / I2(y_t)``. Given the node, the completed
vector ``z = (y, x)`` is Gaussian with mean linear in the observed entries,
so every E-step quantity reduces to per-node sums

* ``omega_sum[g] = sum_t omega[t, g]``
* ``first[g] = sum_t omega[t, g] E[z | y_t^o, g]``
* ``second[g] = sum_t omega[t, g] E[z^T z | y_t^o, g]``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core_types import DataSet, ModelParams
from .quadrature import NodeSet, node_set

LOG_2PI = np.log(2.0 * np.pi)
_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True)
class NodeStatistics:
    nodes: NodeSet
    omega_sum: np.ndarray  # (G,)
    first: np.ndarray  # (G, d + k)
    second: np.ndarray  # (G, d + k, d + k)
    row_loglik: np.ndarray  # (N,)
    d: int
    k: int

    @property
    def loglik(self) -> float:
        return float(np.sum(self.row_loglik))

    @property
    def n_rows(self) -> int:
        return self.row_loglik.shape[0]


def _patterns(mask: np.ndarray):
    pats, inverse = np.unique(mask, axis=0, return_inverse=True)
    return [(pats[i], np.flatnonzero(inverse.ravel() == i)) for i in range(pats.shape[0])]


def node_moments(params: ModelParams, nodes: NodeSet):
    """Marginal mean and covariance of ``y`` at every node."""
    W = params.W
    Sigma = np.einsum("ij,gj,lj->gil", W, 1.0 / nodes.v, W)
    idx = np.arange(params.d)
    Sigma[:, idx, idx] += params.sigma2 / nodes.u
    mu_y = params.mu + params.delta_eps / nodes.u + (params.delta_x / nodes.v) @ W.T
    return mu_y, Sigma


def _observed_precision(params: ModelParams, nodes: NodeSet, o: np.ndarray):
    """Inverse and log-determinant of the observed block of ``Cov[y | node]``.

    With ``B = (sigma2 V)^(-1/2) W^T U^(1/2)`` the block factors as
    ``sigma2 U^(-1/2) (I + B^T B) U^(-1/2)``. The triangular factor of
    ``I + B^T B`` comes from a QR decomposition of ``[I; B]``, which stays
    accurate when a tiny mixing value makes ``B`` huge.
    """
    s2 = params.sigma2
    Wo = params.W[o]
    su = np.sqrt(nodes.u[:, o])  # (G, do)
    B = (Wo.T[None, :, :] * su[:, None, :]) / np.sqrt(s2 * nodes.v)[:, :, None]  # (G, k, do)
    G, do = su.shape
    Z = np.concatenate([np.broadcast_to(np.eye(do), (G, do, do)), B], axis=1)
    R = np.linalg.qr(Z, mode="r")
    diag = np.abs(np.diagonal(R, axis1=1, axis2=2))
    Rinv = np.linalg.inv(R)
    S = Rinv @ np.swapaxes(Rinv, 1, 2)  # (I + B^T B)^-1
    P = su[:, :, None] * S * su[:, None, :] / s2
    logdet = do * np.log(s2) - 2.0 * np.sum(np.log(su), axis=1) + 2.0 * np.sum(np.log(diag), axis=1)
    return 0.5 * (P + np.swapaxes(P, 1, 2)), logdet


def _row_log_m(Yo, mu_o, P, logdet, centre):
    """Log Gaussian density of observed rows ``Yo`` (n, do) at every node.

    The quadratic form is expanded around ``centre`` so that the row-node
    products become two matrix multiplications.
    """
    n, do = Yo.shape
    r = Yo - centre
    m = mu_o - centre  # (G, do)
    Pm = np.einsum("gij,gj->gi", P, m)
    quad = (r[:, :, None] * r[:, None, :]).reshape(n, do * do) @ P.reshape(-1, do * do).T
    quad -= 2.0 * r @ Pm.T
    quad += np.einsum("gi,gi->g", m, Pm)
    np.maximum(quad, 0.0, out=quad)
    return -0.5 * (do * LOG_2PI + logdet + quad)  # (n, G)


def row_log_m(data: DataSet, params: ModelParams, nodes: NodeSet) -> np.ndarray:
    """``log m(y_t^o, node g)`` as an (N, G) array."""
    mu_y, _ = node_moments(params, nodes)
    out = np.empty((data.N, nodes.size))
    for pat, rows in _patterns(data.mask):
        o = np.flatnonzero(pat)
        P, logdet = _observed_precision(params, nodes, o)
        step = max(1, _CHUNK_ELEMS // (nodes.size * o.size))
        for c in range(0, rows.size, step):
            rr = rows[c : c + step]
            out[rr] = _row_log_m(data.Y[np.ix_(rr, o)], mu_y[:, o], P, logdet, params.mu[o])
    return out


def row_loglik(data: DataSet, params: ModelParams, grid) -> np.ndarray:
    """Per-row marginal log-density by log-sum-exp over the nodes."""
    nodes = node_set(grid, params.nu_eps, params.nu_x)
    lm = row_log_m(data, params, nodes)
    _check_finite(lm)
    return logsumexp(lm + nodes.log_w, axis=1)


def _check_finite(lm):
    if not np.all(np.isfinite(lm)):
        t, g = np.argwhere(~np.isfinite(lm))[0]
        raise ArithmeticError(f"non-finite integrand for row {t} at node {g}")


def node_statistics(data: DataSet, params: ModelParams, grid) -> NodeStatistics:
    """Posterior weights and completed-data moments aggregated per node."""
    nodes = node_set(grid, params.nu_eps, params.nu_x)
    d, k = params.d, params.k
    G = nodes.size
    W = params.W
    mu_y, Sigma = node_moments(params, nodes)
    Vinv = 1.0 / nodes.v
    # joint covariance of (y, x) at each node
    J = np.zeros((G, d + k, d + k))
    J[:, :d, :d] = Sigma
    cross = W[None, :, :] * Vinv[:, None, :]
    J[:, :d, d:] = cross
    J[:, d:, :d] = np.swapaxes(cross, 1, 2)
    J[:, np.arange(d, d + k), np.arange(d, d + k)] = Vinv
    mean_z = np.concatenate([mu_y, params.delta_x * Vinv], axis=1)

    omega_sum = np.zeros(G)
    first = np.zeros((G, d + k))
    second = np.zeros((G, d + k, d + k))
    row_ll = np.empty(data.N)

    for pat, rows in _patterns(data.mask):
        o = np.flatnonzero(pat)
        do = o.size
        P, logdet = _observed_precision(params, nodes, o)
        mu_o = mu_y[:, o]
        Om = np.zeros(G)
        Y1 = np.zeros((G, do))
        Y2 = np.zeros((G, do * do))
        step = max(1, _CHUNK_ELEMS // (G * do))
        for c in range(0, rows.size, step):
            rr = rows[c : c + step]
            Yo = data.Y[np.ix_(rr, o)]
            lm = _row_log_m(Yo, mu_o, P, logdet, params.mu[o])
            _check_finite(lm)
            lw = lm + nodes.log_w
            mx = lw.max(axis=1, keepdims=True)
            om = np.exp(lw - mx)
            tot = om.sum(axis=1)
            row_ll[rr] = mx[:, 0] + np.log(tot)
            om /= tot[:, None]
            Om += om.sum(axis=0)
            Y1 += om.T @ Yo
            Y2 += om.T @ (Yo[:, :, None] * Yo[:, None, :]).reshape(len(rr), do * do)
        Y2 = Y2.reshape(G, do, do)

        K = J[:, :, o] @ P  # (G, d+k, do)
        a = mean_z - np.einsum("gij,gj->gi", K, mu_o)
        C = J - K @ J[:, o, :]
        B = np.swapaxes(K, 1, 2)  # (G, do, d+k)
        # observed coordinates are known exactly
        a[:, o] = 0.0
        B[:, :, o] = np.eye(do)
        C[:, o, :] = 0.0
        C[:, :, o] = 0.0
        YB = np.einsum("gi,gij->gj", Y1, B)
        omega_sum += Om
        first += Om[:, None] * a + YB
        second += (
            Om[:, None, None] * (C + a[:, :, None] * a[:, None, :])
            + a[:, :, None] * YB[:, None, :]
            + YB[:, :, None] * a[:, None, :]
            + np.swapaxes(B, 1, 2) @ Y2 @ B
        )
    second = 0.5 * (second + np.swapaxes(second, 1, 2))
    return NodeStatistics(nodes, omega_sum, first, second, row_ll, d, k)
