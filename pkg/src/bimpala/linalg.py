"""Dense tensor kernels and the two factorizations the rest of the package uses.

Tensors are plain float64 numpy arrays in channel-major ``[C, H, W]`` layout
(optionally with a leading batch axis).  A flattened K x K patch over ``n``
input channels is indexed ``j*K*K + k1*K + k2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "SvdResult",
    "SymEigResult",
    "im2col",
    "col2im",
    "im2col_cb",
    "col2im_cb",
    "conv_output_size",
    "matmul",
    "svd",
    "sym_eig",
    "make_rng",
    "rng_next_gaussian",
    "rng_shuffle",
]


def _check_kernel(kernel_size: int, stride: int, pad: int) -> None:
    if kernel_size < 1 or kernel_size % 2 != 1:
        raise ValueError(
            f"kernel_size must be odd and >= 1 (centered windows need K = 2l+1), got {kernel_size}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")


def conv_output_size(size: int, kernel_size: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel_size) // stride + 1


def im2col(x: np.ndarray, kernel_size: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold patches into columns.

    ``x`` is ``[C, H, W]`` or ``[B, C, H, W]``; the result is
    ``[C*K*K, Ho*Wo]`` (or ``[B, C*K*K, Ho*Wo]``).  Column ``p`` holds the
    patch whose window starts at padded position ``(p // Wo * stride, p % Wo * stride)``,
    i.e. the window centered on output position ``p`` when ``pad == K // 2``.
    Out-of-bounds reads are zero.
    """
    _check_kernel(kernel_size, stride, pad)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [B,C,H,W], got shape {x.shape}")
    b, c, h, w = x.shape
    k = kernel_size
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} too large for input {h}x{w} with pad {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [B, C, Ho, Wo, K, K] -> [B, C, K, K, Ho, Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)
    return cols[0] if squeeze else cols


def col2im(
    cols: np.ndarray, shape: tuple[int, ...], kernel_size: int, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into an input-shaped array."""
    _check_kernel(kernel_size, stride, pad)
    squeeze = len(shape) == 3
    if squeeze:
        shape = (1, *shape)
        cols = cols[None]
    b, c, h, w = shape
    k = kernel_size
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    cols = cols.reshape(b, c, k, k, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for k1 in range(k):
        for k2 in range(k):
            xp[:, :, k1 : k1 + stride * ho : stride, k2 : k2 + stride * wo : stride] += cols[:, :, k1, k2]
    out = xp[:, :, pad : pad + h, pad : pad + w]
    return out[0] if squeeze else np.ascontiguousarray(out)


def im2col_cb(x: np.ndarray, kernel_size: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """:func:`im2col` for a ``[C, B, H, W]`` batch, folding the batch into the columns.

    Returns ``[C*K*K, B*Ho*Wo]``: one GEMM then convolves the whole batch.
    """
    _check_kernel(kernel_size, stride, pad)
    c, b, h, w = x.shape
    k = kernel_size
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    if stride == 1:
        # one shifted block copy per kernel offset; the zero fill stands in for padding
        cols = np.zeros((c, k, k, b, ho, wo), dtype=x.dtype)
        for k1 in range(k):
            r0, r1 = max(0, pad - k1), min(ho, h + pad - k1)
            for k2 in range(k):
                c0, c1 = max(0, pad - k2), min(wo, w + pad - k2)
                if r0 < r1 and c0 < c1:
                    cols[:, k1, k2, :, r0:r1, c0:c1] = x[:, :, r0 + k1 - pad : r1 + k1 - pad, c0 + k2 - pad : c1 + k2 - pad]
        return cols.reshape(c * k * k, b * ho * wo)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(c * k * k, b * ho * wo)


def col2im_cb(cols: np.ndarray, shape: tuple[int, int, int, int], kernel_size: int, stride: int = 1, pad: int = 0):
    """Adjoint of :func:`im2col_cb`."""
    c, b, h, w = shape
    k = kernel_size
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    cols = cols.reshape(c, k, k, b, ho, wo)
    xp = np.zeros((c, b, h + 2 * pad, w + 2 * pad))
    for k1 in range(k):
        for k2 in range(k):
            xp[:, :, k1 : k1 + stride * ho : stride, k2 : k2 + stride * wo : stride] += cols[:, k1, k2]
    return xp[:, :, pad : pad + h, pad : pad + w]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SvdResult:
    left: np.ndarray  # [r, r], columns are left singular vectors
    singular_values: np.ndarray  # [min(r, c)], descending
    right: np.ndarray  # [c, c], columns are right singular vectors

    def reconstruct(self) -> np.ndarray:
        k = len(self.singular_values)
        return (self.left[:, :k] * self.singular_values) @ self.right[:, :k].T


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # descending, signed
    eigenvectors: np.ndarray  # rows pair with eigenvalues

    def reconstruct(self) -> np.ndarray:
        f = self.eigenvectors
        return (f.T * self.eigenvalues) @ f


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (p, q) exactly once in n-1 rounds of disjoint pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= n or q >= n:
                continue
            ps.append(min(p, q))
            qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def _round_robin_layouts(m: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Gather permutations that bring each round's pairs to adjacent slots.

    Returns the per-round relayout permutations (each relative to the
    previous layout) and the final permutation restoring natural order.
    """
    players = list(range(m))
    cur = np.arange(m)
    steps = []
    for _ in range(m - 1):
        order = []
        for i in range(m // 2):
            order += [players[i], players[m - 1 - i]]
        order = np.array(order, dtype=np.intp)
        inv = np.empty(m, dtype=np.intp)
        inv[cur] = np.arange(m)
        steps.append(inv[order])
        cur = order
        players = [players[0], players[-1], *players[1:-1]]
    back = np.empty(m, dtype=np.intp)
    back[cur] = np.arange(m)
    return steps, back


def _rotate_pairs(x: np.ndarray, c: np.ndarray, s: np.ndarray, axis: int) -> None:
    """In-place rotation of adjacent index pairs (2i, 2i+1) along ``axis``."""
    if axis == 0:
        x3 = x.reshape(x.shape[0] // 2, 2, x.shape[1])
        xp = x3[:, 0, :].copy()
        xq = x3[:, 1, :]
        x3[:, 0, :] = c[:, None] * xp - s[:, None] * xq
        x3[:, 1, :] = s[:, None] * xp + c[:, None] * xq
    else:
        x3 = x.reshape(x.shape[0], x.shape[1] // 2, 2)
        xp = x3[:, :, 0].copy()
        xq = x3[:, :, 1]
        x3[:, :, 0] = c * xp - s * xq
        x3[:, :, 1] = s * xp + c * xq


def sym_eig(q: np.ndarray, max_sweeps: int = 60) -> SymEigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every (p, q) plane once in round-robin order, so a
    round rotates disjoint planes at once; the matrix is relaid out between
    rounds so paired indices sit next to each other.  The visiting order is
    fixed, so results are deterministic.  Eigenvalues come back in
    descending signed order; equal eigenvalues keep the diagonal order the
    last sweep leaves them in (stable sort).
    """
    a0 = np.array(q, dtype=np.float64)
    if a0.ndim != 2 or a0.shape[0] != a0.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {a0.shape}")
    if not np.all(np.isfinite(a0)):
        raise ValueError("sym_eig input contains NaN or Inf")
    scale = np.max(np.abs(a0)) if a0.size else 0.0
    if np.max(np.abs(a0 - a0.T), initial=0.0) > 1e-8 * scale:
        raise ValueError("sym_eig input is not symmetric; symmetrize first")
    n = a0.shape[0]
    # an odd size gets one decoupled zero row/column; it is never rotated
    m = n + (n % 2)
    a = np.zeros((m, m))
    a[:n, :n] = 0.5 * (a0 + a0.T)
    v = np.eye(m)
    fro = np.linalg.norm(a)
    if n > 1 and fro > 0:
        steps, back = _round_robin_layouts(m)
        skip = 1e-18 * fro
        for _ in range(max_sweeps):
            if np.linalg.norm(a - np.diag(np.diag(a))) <= 1e-15 * fro:
                break
            rotated = False
            for perm in steps:
                a = a.take(perm, axis=0).take(perm, axis=1)
                v = v.take(perm, axis=1)
                d = np.diagonal(a)
                apq = np.diagonal(a, 1)[0::2]
                act = np.abs(apq) > skip
                if not act.any():
                    continue
                rotated = True
                with np.errstate(over="ignore"):
                    theta = (d[1::2] - d[0::2]) / (2.0 * np.where(act, apq, 1.0))
                    t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(theta == 0, 1.0, t)
                t = np.where(act, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                _rotate_pairs(a, c, s, axis=0)
                _rotate_pairs(a, c, s, axis=1)
                _rotate_pairs(v, c, s, axis=1)
            a = a.take(back, axis=0).take(back, axis=1)
            v = v.take(back, axis=1)
            if not rotated:
                break
    lam = np.diag(a)[:n].copy()
    vecs = v[:n, :n]
    order = np.argsort(-lam, kind="stable")
    return SymEigResult(eigenvalues=lam[order], eigenvectors=np.ascontiguousarray(vecs.T[order]))


def _complete_basis(cols: np.ndarray, dim: int) -> np.ndarray:
    """Extend orthonormal columns ``cols`` [dim, k] to a full orthonormal basis.

    Pivoted Gram-Schmidt on the residual projector I - P P^T: each new vector
    is the largest remaining residual column (first index on ties),
    re-orthogonalized once against everything accepted so far.
    """
    k = cols.shape[1]
    basis = np.zeros((dim, dim))
    basis[:, :k] = cols
    resid = np.eye(dim) - cols @ cols.T
    while k < dim:
        norms = np.einsum("ij,ij->j", resid, resid)
        j = int(np.argmax(norms))
        cand = resid[:, j].copy()
        cand -= basis[:, :k] @ (basis[:, :k].T @ cand)
        cand /= np.linalg.norm(cand)
        basis[:, k] = cand
        k += 1
        resid -= np.outer(cand, cand @ resid)
    return basis


def _hestenes(a: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a tall matrix (rows >= cols)."""
    r, c = a.shape
    w = a.copy()
    v = np.eye(c)
    if c > 1:
        rounds = _round_robin(c)
        for _ in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                wp, wq = w[:, p], w[:, q]
                alpha = np.einsum("ij,ij->j", wp, wp)
                beta = np.einsum("ij,ij->j", wq, wq)
                gamma = np.einsum("ij,ij->j", wp, wq)
                act = np.abs(gamma) > 1e-15 * np.sqrt(alpha * beta)
                if not np.any(act):
                    continue
                rotated = True
                g = np.where(act, gamma, 1.0)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.sign(zeta) / (np.abs(zeta) + np.hypot(zeta, 1.0))
                t = np.where(zeta == 0, 1.0, t)
                t = np.where(act, t, 0.0)
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                w[:, p] = cs * wp - sn * wq
                w[:, q] = sn * wp + cs * wq
                vp, vq = v[:, p], v[:, q]
                v[:, p] = cs * vp - sn * vq
                v[:, q] = sn * vp + cs * vq
            if not rotated:
                break
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    w = w[:, order]
    v = v[:, order]
    cutoff = 1e-14 * sigma[0] if c and sigma[0] > 0 else 0.0
    keep = int(np.sum(sigma > cutoff)) if c and sigma[0] > 0 else 0
    u = w[:, :keep] / sigma[:keep]
    u = _complete_basis(u, r)
    sigma[keep:] = np.where(sigma[keep:] > 0, sigma[keep:], 0.0)
    return u, sigma, v


def svd(a: np.ndarray, max_sweeps: int = 60) -> SvdResult:
    """Full SVD by one-sided (Hestenes) Jacobi.

    Works on the tall orientation of ``a``.  Equal singular values keep the
    column order produced by the final sweep (stable sort).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd input contains NaN or Inf")
    r, c = a.shape
    if r >= c:
        u, s, v = _hestenes(a, max_sweeps)
        return SvdResult(left=u, singular_values=s, right=v)
    u, s, v = _hestenes(a.T.copy(), max_sweeps)
    return SvdResult(left=v, singular_values=s, right=u)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical across platforms for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def rng_next_gaussian(rng: np.random.Generator) -> float:
    """Standard normal draw (numpy's ziggurat transform of PCG64 uniforms)."""
    return float(rng.standard_normal())


def rng_shuffle(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)
