"""Weight-based spectral decomposition of bilinear conv and FC layers.

For a bilinear conv with kernels U, V ([m, n, K, K]) the output channel ``i``
on a flattened patch ``x`` (length nK^2, index ``j*K*K + k1*K + k2``) is

    (U_i . x)(V_i . x) = x^T Bsym[i] x,    Bsym[i] = (U_i V_i^T + V_i U_i^T) / 2

Contracting ``Bsym`` with an output direction ``u`` gives a quadratic form
``Q_u`` whose eigenvectors ("eigenfilters") split the projected output into
independent squared filter responses:  u . out(x) = sum_i lam_i (f_i . x)^2.

Every form built here is ``sym(A B^T)`` for thin factors A, B, so besides the
dense Jacobi route we can diagonalize inside span([A, B]) and fill the
orthogonal complement with exact zero eigenvalues.  Both routes return the
same :class:`EigenfilterBasis` contract.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import BConvParams, FCBilinearParams, KernelSpec, conv2d_forward, conv_cb, to_cb, from_cb
from .linalg import svd, sym_eig

PROVENANCES = ("singular_channel", "standard_basis", "action_logit", "custom")


@dataclass(frozen=True)
class SymmetricBilinearTensor:
    data: np.ndarray  # [m, N, N]
    spec: KernelSpec
    u_flat: np.ndarray  # [m, N]
    v_flat: np.ndarray  # [m, N]

    @property
    def out_channels(self) -> int:
        return self.data.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class QuadraticForm:
    q: np.ndarray  # [N, N], symmetric
    direction: np.ndarray
    provenance: str = "custom"
    # q == (left @ right.T + right @ left.T) / 2 when factors are known
    left: np.ndarray | None = None
    right: np.ndarray | None = None
    filter_shape: tuple[int, ...] | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """x^T Q x for x [..., N]."""
        return np.einsum("...i,ij,...j->...", x, self.q, x)


@dataclass(frozen=True)
class EigenfilterBasis:
    eigenvalues: np.ndarray  # [N], descending signed
    filters: np.ndarray  # [N, N], row i pairs with eigenvalues[i]
    provenance: str = "custom"
    filter_shape: tuple[int, ...] | None = None

    def filter(self, i: int) -> np.ndarray:
        f = self.filters[i]
        return f.reshape(self.filter_shape) if self.filter_shape else f

    def top_k(self, k: int) -> np.ndarray:
        """Indices of the k largest-|lambda| eigenfilters (stable w.r.t. signed order)."""
        return np.argsort(-np.abs(self.eigenvalues), kind="stable")[:k]

    def reconstruct(self, idx: np.ndarray | None = None) -> np.ndarray:
        lam, f = self.eigenvalues, self.filters
        if idx is not None:
            lam, f = lam[idx], f[idx]
        return (f.T * lam) @ f

    def contributions(self, x: np.ndarray) -> np.ndarray:
        """Per-eigenfilter terms lam_i (f_i . x)^2 for x [..., N] -> [..., N]."""
        return self.eigenvalues * (x @ self.filters.T) ** 2


def build_bsym(params: BConvParams) -> SymmetricBilinearTensor:
    """Symmetrized interaction tensor, one [nK^2, nK^2] slice per output channel.

    Block (j, k) of the raw slice is U_j^T V_k (outer product of the per-input-
    channel flattened filters); the raw slice is therefore outer(U_i, V_i).
    """
    m = params.u.shape[0]
    uf = params.u.reshape(m, -1)
    vf = params.v.reshape(m, -1)
    raw = np.einsum("ia,ib->iab", uf, vf)
    data = 0.5 * (raw + raw.transpose(0, 2, 1))
    return SymmetricBilinearTensor(data=data, spec=params.spec, u_flat=uf, v_flat=vf)


def quadratic_form(bsym: SymmetricBilinearTensor, u: np.ndarray, provenance: str = "custom") -> QuadraticForm:
    """Q_u = sum_i u_i Bsym[i]."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (bsym.out_channels,):
        raise ValueError(f"direction must have length {bsym.out_channels}, got shape {u.shape}")
    q = np.tensordot(u, bsym.data, axes=(0, 0))
    spec = bsym.spec
    return QuadraticForm(
        q=q,
        direction=u,
        provenance=provenance,
        left=(bsym.u_flat * u[:, None]).T,
        right=bsym.v_flat.T.copy(),
        filter_shape=(spec.in_channels, spec.kernel_size, spec.kernel_size),
    )


def standard_basis_form(bsym: SymmetricBilinearTensor, channel: int) -> QuadraticForm:
    e = np.zeros(bsym.out_channels)
    e[channel] = 1.0
    return quadratic_form(bsym, e, provenance="standard_basis")


def _factored_eig(qf: QuadraticForm) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of sym(A B^T) computed inside span([A, B])."""
    n = qf.q.shape[0]
    w = np.concatenate([qf.left, qf.right], axis=1)
    res = svd(w)
    sv = res.singular_values
    rank = int(np.sum(sv > 1e-12 * sv[0])) if len(sv) and sv[0] > 0 else 0
    basis = res.left  # [N, N]; first ``rank`` columns span the factors
    p = basis[:, :rank]
    small = p.T @ qf.q @ p
    small = 0.5 * (small + small.T)
    inner = sym_eig(small)
    lam = np.concatenate([inner.eigenvalues, np.zeros(n - rank)])
    filt = np.concatenate([inner.eigenvectors @ p.T, basis[:, rank:].T], axis=0)
    order = np.argsort(-lam, kind="stable")
    return lam[order], np.ascontiguousarray(filt[order])


def eigenfilters(qf: QuadraticForm, method: str = "auto") -> EigenfilterBasis:
    """Spectral decomposition Q = sum_i lam_i f_i f_i^T.

    ``method`` is ``"jacobi"`` (dense Jacobi on Q), ``"factored"`` (needs the
    thin factors; exact zeros on the complement of their span) or ``"auto"``
    (factored when the factors are thin enough to pay off).
    """
    n = qf.q.shape[0]
    has_factors = qf.left is not None and qf.right is not None
    if method == "auto":
        method = "factored" if has_factors and 2 * qf.left.shape[1] < n else "jacobi"
    if method == "factored":
        if not has_factors:
            raise ValueError("factored eigendecomposition needs the form's thin factors")
        lam, filt = _factored_eig(qf)
    elif method == "jacobi":
        res = sym_eig(qf.q)
        lam, filt = res.eigenvalues, res.eigenvectors
    else:
        raise ValueError(f"unknown method {method!r}")
    return EigenfilterBasis(lam, filt, qf.provenance, qf.filter_shape)


def contribution_map(f: np.ndarray, lam: float, x: np.ndarray) -> np.ndarray:
    """lam * (f * X)^2 at every position of X [n, H, W] (same padding) -> [H, W]."""
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"X must be [n,H,W], got {x.shape}")
    n = x.shape[0]
    if f.size % n:
        raise ValueError(f"filter of length {f.size} does not match {n} input channels")
    k = int(round(np.sqrt(f.size // n)))
    if n * k * k != f.size:
        raise ValueError(f"filter of length {f.size} is not n*K*K for n={n}")
    resp = conv2d_forward(x, f.reshape(1, n, k, k))[0]
    return lam * resp**2


# --- probes -----------------------------------------------------------------


@dataclass(frozen=True)
class ProbeSVD:
    singular_values: np.ndarray  # [min(C, wh)]
    channel_vectors: np.ndarray  # [C, C], columns
    spatial_vectors: np.ndarray  # [wh, wh], columns
    variance_fraction: np.ndarray  # cumulative share of sigma^2
    activation_shape: tuple[int, int, int]

    def components_for(self, fraction: float) -> int:
        """Smallest m whose cumulative variance share reaches ``fraction``."""
        return int(np.searchsorted(self.variance_fraction, fraction - 1e-12) + 1)


def probe_svd(weights: np.ndarray, activation_shape: tuple[int, int, int]) -> ProbeSVD:
    """SVD of probe weights reshaped channel-major to [C, h*w]."""
    c, h, w = activation_shape
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != c * h * w:
        raise ValueError(f"probe has {weights.size} weights, activation shape {activation_shape} needs {c * h * w}")
    mat = weights.reshape(c, h * w)
    if not np.any(mat):
        raise ValueError("probe weights are all zero; nothing to decompose")
    res = svd(mat)
    left, right = res.left.copy(), res.right.copy()
    # sign convention: largest-|.| entry of each spatial vector is positive, so
    # negating the probe negates the channel vectors (and every importance score)
    for j in range(len(res.singular_values)):
        if right[np.argmax(np.abs(right[:, j])), j] < 0:
            right[:, j] *= -1
            left[:, j] *= -1
    s2 = res.singular_values**2
    frac = np.cumsum(s2) / np.sum(s2)
    return ProbeSVD(res.singular_values, left, right, frac, (c, h, w))


@dataclass(frozen=True)
class ImportanceRow:
    singular_index: int
    eigen_index: int
    score: float
    rank: int


@dataclass
class ImportanceTable:
    rows: list[ImportanceRow]
    bases: list[EigenfilterBasis] = field(repr=False)
    singular_values: np.ndarray = field(repr=False)
    spatial_vectors: np.ndarray = field(repr=False)  # [wh, m] for the retained components

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.rows])


def joint_importance(psvd: ProbeSVD, bsym: SymmetricBilinearTensor, m_components: int | None = None) -> ImportanceTable:
    """Signed importance s_j * lam^i_{u_j} for each retained singular channel u_j.

    ``m_components`` defaults to the smallest count explaining 90% of the
    probe's squared singular values.
    """
    c = psvd.activation_shape[0]
    if m_components is None:
        m_components = psvd.components_for(0.9)
    limit = min(c, bsym.out_channels, len(psvd.singular_values))
    if not 1 <= m_components <= limit:
        raise ValueError(f"m_components must be in [1, {limit}], got {m_components}")
    if c != bsym.out_channels:
        raise ValueError(f"probe has {c} channels but the layer writes {bsym.out_channels}")
    bases, entries = [], []
    for j in range(m_components):
        basis = eigenfilters(quadratic_form(bsym, psvd.channel_vectors[:, j], provenance="singular_channel"))
        bases.append(basis)
        for i, lam in enumerate(basis.eigenvalues):
            entries.append((j, i, float(psvd.singular_values[j] * lam)))
    order = sorted(range(len(entries)), key=lambda t: -abs(entries[t][2]))
    rows = [ImportanceRow(*entries[t], rank=r) for r, t in enumerate(order)]
    return ImportanceTable(
        rows=rows,
        bases=bases,
        singular_values=psvd.singular_values[:m_components].copy(),
        spatial_vectors=psvd.spatial_vectors[:, :m_components].copy(),
    )


def probe_readout(table: ImportanceTable, x: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Probe score of the bilinear term rebuilt from eigenfilters.

    sum_j s_j sum_p v_j[p] sum_i lam^i_j (f^i_j * X)^2[p]   for X [n,H,W] or [B,n,H,W].
    With every singular component kept this equals the probe (without bias)
    applied to the layer's bilinear output.
    """
    xc, single = to_cb(x)
    k = spec.kernel_size
    total = np.zeros(xc.shape[1])
    for s_j, basis, v_j in zip(table.singular_values, table.bases, table.spatial_vectors.T):
        filt = basis.filters.reshape(-1, spec.in_channels, k, k)
        resp, _ = conv_cb(xc, filt)  # [N, B, H, W]
        per_pos = np.tensordot(basis.eigenvalues, resp**2, axes=(0, 0))  # [B, H, W]
        total += s_j * per_pos.reshape(per_pos.shape[0], -1) @ v_j
    return total[0] if single else total


# --- action forms -------------------------------------------------------------


def action_quadratic_form(fc: FCBilinearParams, head_row: np.ndarray) -> QuadraticForm:
    """Form on the flatten space whose value is one action's logit.

    logit(x) = sum_k h_k (x.F_k)(x.H_k) = x^T sym(F diag(h) H^T) x.
    """
    head_row = np.asarray(head_row, dtype=np.float64)
    if head_row.shape != (fc.f.shape[1],):
        raise ValueError(f"head row must have length {fc.f.shape[1]}, got shape {head_row.shape}")
    left = fc.f * head_row
    q = left @ fc.h.T
    q = 0.5 * (q + q.T)
    return QuadraticForm(q=q, direction=head_row, provenance="action_logit", left=left, right=fc.h.copy())


# --- ablations ----------------------------------------------------------------


@dataclass
class AblatedBConv:
    """Bilinear layer replaced by its top-k eigenfilter expansion per output channel.

    Channel i computes sum over kept (lam, f) of lam * (f * X)^2, with the
    pairs drawn from the standard-basis form of channel i.
    """

    filters: np.ndarray  # [m, k, n, K, K]
    eigenvalues: np.ndarray  # [m, k]

    def __call__(self, x_cb: np.ndarray) -> np.ndarray:
        m, k = self.eigenvalues.shape
        resp, _ = conv_cb(x_cb, self.filters.reshape(m * k, *self.filters.shape[2:]))
        resp = resp.reshape(m, k, *resp.shape[1:])
        return np.einsum("mk,mk...->m...", self.eigenvalues, resp**2)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Standard-layout entry point ([n,H,W] or [B,n,H,W])."""
        xc, single = to_cb(x)
        return from_cb(self(xc), single)


def standard_bases(params: BConvParams) -> list[EigenfilterBasis]:
    bsym = build_bsym(params)
    return [eigenfilters(standard_basis_form(bsym, i)) for i in range(bsym.out_channels)]


def ablate_conv_topk(
    params: BConvParams, k: int, basis: str = "standard_channel", bases: list[EigenfilterBasis] | None = None
) -> AblatedBConv:
    if basis != "standard_channel":
        raise ValueError(f"unsupported ablation basis {basis!r}")
    spec = params.spec
    if not 1 <= k <= spec.patch_dim:
        raise ValueError(f"k must be in [1, {spec.patch_dim}], got {k}")
    bases = bases if bases is not None else standard_bases(params)
    filt, lam = [], []
    for b in bases:
        idx = b.top_k(k)
        filt.append(b.filters[idx].reshape(k, spec.in_channels, spec.kernel_size, spec.kernel_size))
        lam.append(b.eigenvalues[idx])
    return AblatedBConv(np.stack(filt), np.stack(lam))


@dataclass
class AblatedHead:
    """Logits rebuilt from the top-k eigenvectors of each action's quadratic form."""

    filters: list[np.ndarray]  # per action [k, D]
    eigenvalues: list[np.ndarray]  # per action [k]

    def __call__(self, flat: np.ndarray) -> np.ndarray:
        flat = np.atleast_2d(flat)
        cols = [((flat @ f.T) ** 2) @ lam for f, lam in zip(self.filters, self.eigenvalues)]
        return np.stack(cols, axis=1)


def action_bases(fc: FCBilinearParams, heads: np.ndarray) -> list[EigenfilterBasis]:
    return [eigenfilters(action_quadratic_form(fc, heads[:, a])) for a in range(heads.shape[1])]


def ablate_fc_topk(
    fc: FCBilinearParams, heads: np.ndarray, k: int, bases: list[EigenfilterBasis] | None = None
) -> AblatedHead:
    d_in = fc.f.shape[0]
    if not 1 <= k <= d_in:
        raise ValueError(f"k must be in [1, {d_in}], got {k}")
    bases = bases if bases is not None else action_bases(fc, heads)
    filt, lam = [], []
    for b in bases:
        idx = b.top_k(k)
        filt.append(b.filters[idx])
        lam.append(b.eigenvalues[idx])
    return AblatedHead(filt, lam)


def conv_overrides(net, blocks: list[str], k: int, cache: dict | None = None) -> dict[str, Callable]:
    """Ablation functors for several blocks of a PolicyNetwork, reusing cached bases."""
    out = {}
    for name in blocks:
        params = net.bconv(name)
        if cache is not None:
            if name not in cache:
                cache[name] = standard_bases(params)
            bases = cache[name]
        else:
            bases = None
        out[name] = ablate_conv_topk(params, k, bases=bases)
    return out
