"""Greedy block-sparse recovery: BOMP, normalized BOMP and ICBOMP.

All products with the dictionary use its Kronecker structure. With R the
residual reshaped to M x T, block n sees

    B_n^H r = P_n^H (h_n^H R)^T        (cost MT + Td)
    B_i^H B_j = (P_i^H P_j)(h_i^H h_j)

so the MT x Nd matrix B never exists. Least squares runs on the normal
equations with a block Cholesky factor that grows by one block row per
iteration and is repaired in place when ICBOMP cancels blocks.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular

from . import codec
from .model import ChannelSet, demodulate_qpsk, modulate_qpsk, unvec, vec


class RecoveryError(RuntimeError):
    """A trial could not be completed (degenerate channel or singular Gram matrix)."""


class Dictionary:
    """Structured access to B = [kron(P_1, h_1), ..., kron(P_N, h_N)]."""

    def __init__(self, precodings: np.ndarray, channels, rho0: float):
        if isinstance(channels, ChannelSet):
            H, norms2 = channels.vectors, channels.norms2
        else:
            H = np.asarray(channels, dtype=np.complex128)
            norms2 = np.einsum("nm,nm->n", H.conj(), H).real
        N, T, d = precodings.shape
        if H.shape[0] != N:
            raise ValueError(f"{N} precoders but {H.shape[0]} channels")
        self.precodings = precodings
        self.channels = H
        self.norms2 = norms2
        self.rho0 = float(rho0)
        self.N, self.T, self.d = N, T, d
        self.M = H.shape[1]

    def check_channel(self, n: int) -> None:
        if not self.norms2[n] > 0:
            raise RecoveryError(f"user {n} has an all-zero channel")

    def block_products(self, R: np.ndarray) -> np.ndarray:
        """conj(B_n^H r) for every user, shape (N, d)."""
        U = self.channels.conj() @ R                         # row n: h_n^H R
        return np.matmul(U.conj()[:, None, :], self.precodings)[:, 0, :]

    def correlations(self, R: np.ndarray, normalize: bool = True) -> np.ndarray:
        """||B_n^H r||^2, divided by ||h_n||^2 when ``normalize``."""
        v = self.block_products(R)
        c = np.einsum("nd,nd->n", v.real, v.real) + np.einsum("nd,nd->n", v.imag, v.imag)
        if normalize:
            if not np.all(self.norms2 > 0):
                raise RecoveryError("all-zero channel vector")
            c = c / self.norms2
        return c


def correlate_block(r: np.ndarray, n: int, dic: Dictionary, normalize: bool = True) -> float:
    """Squared correlation of block ``n`` with the residual vector ``r``."""
    if normalize:
        dic.check_channel(n)
    R = unvec(r, dic.M)
    u = dic.channels[n].conj() @ R
    v = u @ dic.precodings[n].conj()
    c = float(np.vdot(v, v).real)
    return c / dic.norms2[n] if normalize else c


class IncrementalLS:
    """Normal equations of min ||y - sqrt(rho0) B_S s|| for a changing block set S.

    The lower Cholesky factor lives in a preallocated buffer and is only
    touched through d x d blocks and row slices, so solves never copy it.
    """

    def __init__(self, dic: Dictionary, capacity: int):
        self.dic = dic
        d = dic.d
        self.capacity = capacity
        self.users: list[int] = []
        self.L = np.zeros((capacity * d, capacity * d), dtype=np.complex128)
        self.P = np.empty((dic.T, capacity * d), dtype=np.complex128)
        self.regularized = 0

    @property
    def size(self) -> int:
        return len(self.users) * self.dic.d

    def _chol(self, S: np.ndarray, scale: float) -> np.ndarray:
        try:
            return cholesky(S, lower=True, check_finite=False)
        except LinAlgError:
            pass
        eps = 1e-10 * scale
        warnings.warn(f"Gram matrix lost positive definiteness; adding {eps:.3g} to the diagonal",
                      RuntimeWarning, stacklevel=3)
        self.regularized += 1
        try:
            return cholesky(S + eps * np.eye(S.shape[0]), lower=True, check_finite=False)
        except LinAlgError as exc:
            raise RecoveryError("singular Gram matrix in least-squares update") from exc

    def _scale(self) -> float:
        # trace(G)/size: unit-norm precoder columns make each diagonal entry ||h_i||^2
        if not self.users:
            return 1.0
        return float(np.mean(self.dic.norms2[self.users]))

    def _forward(self, B: np.ndarray, nblocks: int) -> np.ndarray:
        """Solve L X = B over the leading ``nblocks`` block rows."""
        d, L = self.dic.d, self.L
        X = np.empty_like(B)
        for i in range(nblocks):
            s = slice(i * d, (i + 1) * d)
            rhs = B[s] - L[s, :i * d] @ X[:i * d] if i else B[s]
            X[s] = solve_triangular(L[s, s], rhs, lower=True, check_finite=False)
        return X

    def _backward(self, Z: np.ndarray, nblocks: int) -> np.ndarray:
        """Solve L^H X = Z over the leading ``nblocks`` block rows."""
        d, L = self.dic.d, self.L
        n = nblocks * d
        X = np.empty_like(Z)
        for i in reversed(range(nblocks)):
            s = slice(i * d, (i + 1) * d)
            rhs = Z[s]
            if i + 1 < nblocks:
                below = L[(i + 1) * d:n, s]
                rhs = rhs - (below.T @ X[(i + 1) * d:n].conj()).conj()
            X[s] = solve_triangular(L[s, s], rhs, lower=True, trans="C", check_finite=False)
        return X

    def add(self, n: int) -> None:
        dic = self.dic
        d, m = dic.d, self.size
        if len(self.users) >= self.capacity:
            raise RecoveryError("least-squares capacity exceeded")
        Pn, hn = dic.precodings[n], dic.channels[n]
        diag = (Pn.conj().T @ Pn) * dic.norms2[n]
        if m:
            H = dic.channels[self.users]
            cross = (Pn.conj().T @ self.P[:, :m]).conj().T          # P_i^H P_n stacked
            cross *= np.repeat(H.conj() @ hn, d)[:, None]           # times h_i^H h_n
            X = self._forward(cross, len(self.users))
            self.L[m:m + d, :m] = X.conj().T
            S = diag - X.conj().T @ X
        else:
            S = diag
        self.users.append(n)
        self.L[m:m + d, m:m + d] = self._chol(S, self._scale())
        self.P[:, m:m + d] = Pn

    def remove(self, drop) -> None:
        """Drop the listed users.

        Deleting block p leaves the kept blocks t behind it with
        L_tt' L_tt'^H = L_tt L_tt^H + W W^H, W = L[t, p], a rank-d update
        done block by block with a QR of the d x 2d panel [L_jj W_j].
        Blocks are eliminated back to front, then the factor is compacted once.
        """
        drop = set(drop)
        gone = [i for i, u in enumerate(self.users) if u in drop]
        if not gone:
            return
        d = self.dic.d
        nb = len(self.users)
        alive = [True] * nb
        rows_of = lambda blocks: np.concatenate([np.arange(j * d, (j + 1) * d) for j in blocks]) \
            if blocks else np.zeros(0, dtype=int)
        for p in reversed(gone):
            alive[p] = False
            after = [j for j in range(p + 1, nb) if alive[j]]
            if not after:
                continue
            W = self.L[rows_of(after), p * d:(p + 1) * d]
            for a, j in enumerate(after):
                s = slice(j * d, (j + 1) * d)
                F = np.hstack([self.L[s, s], W[a * d:(a + 1) * d]])
                Q, Rt = np.linalg.qr(F.conj().T, mode="complete")
                self.L[s, s] = Rt[:d].conj().T
                if a + 1 < len(after):
                    below = rows_of(after[a + 1:])
                    G = np.hstack([self.L[below, s], W[(a + 1) * d:]]) @ Q
                    self.L[below, s] = G[:, :d]
                    W[(a + 1) * d:] = G[:, d:]
        n = nb * d
        keep = rows_of([j for j in range(nb) if alive[j]])
        m = keep.size
        self.L[:m, :m] = self.L[np.ix_(keep, keep)]
        self.L[m:n, :n] = 0
        self.L[:m, m:n] = 0
        self.P[:, :m] = self.P[:, keep]
        self.users = [u for j, u in enumerate(self.users) if alive[j]]

    def rhs(self, Y: np.ndarray) -> np.ndarray:
        """B_S^H y for the current set, shape (|S|, d)."""
        if not self.users:
            return np.zeros((0, self.dic.d), dtype=np.complex128)
        dic = self.dic
        m = len(self.users)
        U = dic.channels[self.users].conj() @ Y                   # (m, T)
        Pv = self.P[:, :m * dic.d].reshape(dic.T, m, dic.d)
        return np.einsum("tmd,mt->md", Pv, U.conj()).conj()

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """LS estimates (|S|, d) for right-hand side B_S^H y."""
        k = len(self.users)
        if k == 0:
            return np.zeros((0, self.dic.d), dtype=np.complex128)
        z = self._forward(np.asarray(rhs, dtype=np.complex128).reshape(-1), k)
        x = self._backward(z, k)
        return (x / np.sqrt(self.dic.rho0)).reshape(-1, self.dic.d)

    def synthesize(self, estimates: np.ndarray) -> np.ndarray:
        """sqrt(rho0) B_S s as an M x T matrix."""
        dic = self.dic
        m = len(self.users)
        if m == 0:
            return np.zeros((dic.M, dic.T), dtype=np.complex128)
        Pv = self.P[:, :m * dic.d].reshape(dic.T, m, dic.d)
        X = np.einsum("tmd,md->mt", Pv, estimates)
        return np.sqrt(dic.rho0) * (dic.channels[self.users].T @ X)


def ls_update(users, y: np.ndarray, dic: Dictionary) -> np.ndarray:
    """Least-squares block estimates for the index set ``users``, shape (len(users), d)."""
    users = list(users)
    if len(users) * dic.d > dic.M * dic.T:
        raise ValueError("more unknowns than measurements")
    ls = IncrementalLS(dic, max(len(users), 1))
    for n in users:
        ls.add(n)
    return ls.solve(ls.rhs(unvec(y, dic.M)))


@dataclass
class RecoveryResult:
    selected: list                                   # lambda_1, lambda_2, ... in selection order
    estimates: dict                                  # user -> length-d symbol estimate
    final_set: list                                  # blocks still held by the LS fit at the end
    blocks_updated: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)
    decoded: dict = field(default_factory=dict)      # user -> DecodeOutcome (ICBOMP)
    cancelled_at: dict = field(default_factory=dict)  # user -> 1-based iteration
    regularized: int = 0

    @property
    def iterations(self) -> int:
        return len(self.selected)


def _masked_argmax(c: np.ndarray, excluded: np.ndarray) -> int:
    c = np.where(excluded, -np.inf, c)
    j = int(np.argmax(c))                            # first maximum: lowest index wins ties
    if excluded[j]:
        raise RecoveryError("no candidate blocks left")
    return j


def bomp_recover(y: np.ndarray, dic: Dictionary, K: int, normalize: bool = True) -> RecoveryResult:
    """K iterations of (normalized) block OMP."""
    if K * dic.d > dic.M * dic.T:
        raise ValueError(f"K*d = {K * dic.d} exceeds M*T = {dic.M * dic.T}")
    if K > dic.N:
        raise ValueError("K exceeds the number of blocks")
    Y = unvec(y, dic.M)
    R = Y.copy()
    excluded = np.zeros(dic.N, dtype=bool)
    ls = IncrementalLS(dic, K)
    rhs = np.zeros((K, dic.d), dtype=np.complex128)
    result = RecoveryResult([], {}, [])
    est = rhs[:0]
    for k in range(K):
        lam = _masked_argmax(dic.correlations(R, normalize), excluded)
        excluded[lam] = True
        result.selected.append(lam)
        ls.add(lam)
        dic_rows = dic.channels[lam].conj() @ Y
        rhs[k] = dic.precodings[lam].conj().T @ dic_rows
        est = ls.solve(rhs[:k + 1])
        R = Y - ls.synthesize(est)
        result.blocks_updated.append(k + 1)
        result.residual_norms.append(float(np.linalg.norm(R)))
    result.final_set = list(ls.users)
    result.estimates = {u: est[i].copy() for i, u in enumerate(ls.users)}
    result.regularized = ls.regularized
    return result


PacketDecoder = Callable[[np.ndarray], "tuple[codec.DecodeOutcome, Optional[np.ndarray]]"]


def decode_block(estimate: np.ndarray) -> tuple:
    """Hard-decide a block, BCH-decode it and rebuild the clean symbols when the CRC passes."""
    outcome = codec.bch_decode(demodulate_qpsk(estimate))
    if not outcome.ok:
        return outcome, None
    return outcome, modulate_qpsk(codec.bch_encode(outcome.word))


def icbomp_recover(y: np.ndarray, dic: Dictionary, K: int,
                   decoder: PacketDecoder = decode_block, adaptive_k: bool = False) -> RecoveryResult:
    """Normalized BOMP with per-iteration decoding and cancellation of error-free blocks.

    With ``adaptive_k`` every cancelled block buys one more iteration, up to
    floor(MT/d) iterations in total.
    """
    cap = min((dic.M * dic.T) // dic.d, dic.N)
    if K > cap:
        raise ValueError(f"K={K} exceeds floor(MT/d) or N ({cap})")
    Y = unvec(y, dic.M).copy()
    R = Y.copy()
    excluded = np.zeros(dic.N, dtype=bool)
    ls = IncrementalLS(dic, cap if adaptive_k else K)
    result = RecoveryResult([], {}, [])
    est = np.zeros((0, dic.d), dtype=np.complex128)
    budget = K
    k = 0
    while k < budget:
        k += 1
        lam = _masked_argmax(dic.correlations(R, True), excluded)
        excluded[lam] = True                          # cancelled or selected: never revisited
        result.selected.append(lam)
        ls.add(lam)
        est = ls.solve(ls.rhs(Y))
        result.blocks_updated.append(len(ls.users))
        clean = {}
        for i, u in enumerate(ls.users):
            outcome, symbols = decoder(est[i])
            result.decoded[u] = outcome
            if symbols is not None:
                clean[u] = symbols
        if clean:
            users = list(clean)
            X = np.einsum("ntd,nd->nt", dic.precodings[users], np.array([clean[u] for u in users]))
            Y -= np.sqrt(dic.rho0) * (dic.channels[users].T @ X)
            keep = [i for i, u in enumerate(ls.users) if u not in clean]
            est = est[keep]
            ls.remove(users)
            for u in users:
                result.cancelled_at[u] = k
                result.estimates[u] = clean[u]
            if adaptive_k:
                budget = min(budget + len(users), cap)
        R = Y - ls.synthesize(est)
        result.residual_norms.append(float(np.linalg.norm(R)))
    result.final_set = list(ls.users)
    for i, u in enumerate(ls.users):
        result.estimates[u] = est[i].copy()
    result.regularized = ls.regularized
    return result
