"""Contrastive (NT-Xent) and distillation (row-softmax KL) losses with analytic gradients."""
from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from ..errors import DegenerateEmbedding, ShapeError


def _unit_rows(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0):
        raise DegenerateEmbedding(f"zero-norm embedding row(s) at {np.flatnonzero(norms == 0)[:5].tolist()}")
    return M / norms[:, None], norms


def ntxent_pair_loss(u: np.ndarray, v: np.ndarray, U: np.ndarray, V: np.ndarray, tau: float, k: int | None = None) -> float:
    """ℓ(u, v): positive pair (u, v) against inter-view (V_i) and intra-view (U_i) negatives, i ≠ k.

    ``k`` is the row of ``u`` in ``U``; it is located by identity when omitted.
    """
    if k is None:
        matches = np.flatnonzero(np.all(U == u, axis=1) & np.all(V == v, axis=1))
        if len(matches) == 0:
            raise ValueError("u/v are not a row pair of U/V")
        k = int(matches[0])
    Uh, _ = _unit_rows(np.asarray(U, dtype=np.float64))
    Vh, _ = _unit_rows(np.asarray(V, dtype=np.float64))
    uh = Uh[k]
    inter = Vh @ uh / tau
    intra = np.delete(Uh @ uh / tau, k)
    return float(logsumexp(np.concatenate([inter, intra])) - inter[k])


def _half_loss(Ah: np.ndarray, Bh: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row ℓ(a_k, b_k) and the softmax weights over inter/intra similarities."""
    n = len(Ah)
    S_ab = Ah @ Bh.T / tau
    S_aa = Ah @ Ah.T / tau
    S_aa_masked = S_aa.copy()
    np.fill_diagonal(S_aa_masked, -np.inf)
    logits = np.concatenate([S_ab, S_aa_masked], axis=1)
    lse = logsumexp(logits, axis=1)
    losses = lse - np.diag(S_ab)
    P = np.exp(logits - lse[:, None])
    return losses, P[:, :n], P[:, n:]


def contrastive_loss(U: np.ndarray, V: np.ndarray, tau: float) -> float:
    """L_G = 1/(2N) Σ_k [ℓ(u_k, v_k) + ℓ(v_k, u_k)]."""
    return contrastive_loss_and_grad(U, V, tau, need_grad=False)[0]


def contrastive_loss_and_grad(U: np.ndarray, V: np.ndarray, tau: float, need_grad: bool = True):
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if U.shape != V.shape or U.ndim != 2:
        raise ShapeError(f"views differ in shape: {U.shape} vs {V.shape}")
    n = len(U)
    Uh, nu = _unit_rows(U)
    Vh, nv = _unit_rows(V)
    l1, P_uv, P_uu = _half_loss(Uh, Vh, tau)
    l2, Q_vu, Q_vv = _half_loss(Vh, Uh, tau)
    loss = float((l1.sum() + l2.sum()) / (2 * n))
    if not need_grad:
        return loss, None, None
    eye = np.eye(n)
    # d loss / d S_uv  where S_uv[k, i] = û_k·v̂_i / τ
    G_uv = (P_uv - eye) + (Q_vu - eye).T
    G_uu = P_uu + P_uu.T
    G_vv = Q_vv + Q_vv.T
    scale = 1.0 / (2 * n * tau)
    dUh = scale * (G_uv @ Vh + G_uu @ Uh)
    dVh = scale * (G_uv.T @ Uh + G_vv @ Vh)
    dU = (dUh - Uh * np.sum(dUh * Uh, axis=1, keepdims=True)) / nu[:, None]
    dV = (dVh - Vh * np.sum(dVh * Vh, axis=1, keepdims=True)) / nv[:, None]
    return loss, dU, dV


def kd_loss(R_text: np.ndarray, R_graph: np.ndarray) -> float:
    """Σ_k KL(softmax(r_text,k) ‖ softmax(r_graph,k)), softmax over the hidden dimension."""
    return kd_loss_and_grad(R_text, R_graph, need_grad=False)[0]


def kd_loss_and_grad(R_text: np.ndarray, R_graph: np.ndarray, need_grad: bool = True):
    R_text = np.asarray(R_text, dtype=np.float64)
    R_graph = np.asarray(R_graph, dtype=np.float64)
    if R_text.shape != R_graph.shape:
        raise ShapeError(f"shape mismatch: {R_text.shape} vs {R_graph.shape}")
    log_p = log_softmax(R_text, axis=1)
    log_q = log_softmax(R_graph, axis=1)
    p = np.exp(log_p)
    loss = float(np.sum(p * (log_p - log_q)))
    if not need_grad:
        return loss, None
    return loss, softmax(R_graph, axis=1) - p
