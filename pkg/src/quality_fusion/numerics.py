"""Dense float64 kernels shared by the reliability, fusion and gradient modules.

Matrices are plain 2-D ``numpy.ndarray`` objects in row-major (C) order. Most
kernels also accept stacked inputs (``(..., rows, cols)``) so that a batch of
per-sample slices goes through the same code path as a single slice.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np

from quality_fusion.errors import ContractViolation, DegenerateInputError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
PIVOT_TOL = 1e-12
TENSOR_SUFFIX = ".f64"
SIDECAR_SUFFIX = ".json"


def as_matrix(a: Any) -> np.ndarray:
    """Coerce to a contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a: Any, b: Any) -> np.ndarray:
    """Matrix product of two 2-D operands.

    Args:
        a: ``(m, k)`` matrix-like.
        b: ``(k, n)`` matrix-like.

    Returns:
        The ``(m, n)`` float64 product.

    Raises:
        ContractViolation: either operand is not 2-D or the inner sizes differ.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_rows(a: Any) -> np.ndarray:
    return softmax(as_matrix(a), axis=1)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``y``."""
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def row_l2_norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(a, dtype=np.float64) ** 2, axis=-1))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize the last axis. Zero rows stay zero.

    Returns ``(unit, norms)``.
    """
    norms = row_l2_norms(x)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = np.where(norms[..., None] > 0.0, x / safe[..., None], 0.0)
    return unit, norms


def normalize_rows_backward(unit: np.ndarray, norms: np.ndarray, d_unit: np.ndarray) -> np.ndarray:
    # d(x/|x|) = (du - u (u . du)) / |x|; zero rows get zero gradient
    proj = np.sum(unit * d_unit, axis=-1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)[..., None]
    return np.where(norms[..., None] > 0.0, (d_unit - unit * proj) / safe, 0.0)


def row_l2_norms_backward(x: np.ndarray, norms: np.ndarray, d_norms: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 0.0, norms, 1.0)[..., None]
    return np.where(norms[..., None] > 0.0, x * (d_norms[..., None] / safe), 0.0)


def logistic(x: Any) -> Any:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ContractViolation(f"logit requires p in (0, 1), got {p}")
    return float(np.log(p) - np.log1p(-p))


def sym_eig(a: Any) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Args:
        a: Square matrix, symmetric within ``SYMMETRY_TOL``.

    Returns:
        ``(values, vectors)`` with ``vectors[:, i]`` paired to ``values[i]``.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ContractViolation(f"sym_eig needs a square matrix, got {a.shape}")
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ContractViolation(f"sym_eig input is not symmetric (max |a - a^T| = {asym:.3e})")
    values, vectors = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(values, kind="stable")[::-1]
    return values[order], np.ascontiguousarray(vectors[:, order])


def qr_orthonormalize(a: Any) -> np.ndarray:
    """Orthonormal basis of the column span of ``a``.

    The triangular factor is normalized to a non-negative diagonal so the result
    is unique for full-rank input.

    Args:
        a: ``(rows, cols)`` matrix with ``rows >= cols``.

    Returns:
        ``(rows, cols)`` matrix with orthonormal columns.

    Raises:
        DegenerateInputError: a pivot of the triangular factor is below ``PIVOT_TOL``.
    """
    a = as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise ContractViolation(f"qr_orthonormalize needs rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    diag = np.diag(r)
    pivot = float(np.min(np.abs(diag))) if cols else 1.0
    if pivot < PIVOT_TOL:
        raise DegenerateInputError(
            f"rank-deficient input to qr_orthonormalize (pivot {pivot:.3e})", value=pivot
        )
    signs = np.where(diag < 0.0, -1.0, 1.0)
    return np.ascontiguousarray(q * signs[None, :])


# ---------------------------------------------------------------------------
# Two-layer MLP used by the token update and by the channel reliability head
# ---------------------------------------------------------------------------


@dataclass
class TwoLayerMlp:
    """``tanh(x @ w1 + b1) @ w2 + b2`` applied along the last axis."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(
        cls,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: np.random.Generator,
        output_scale: float = 0.0,
    ) -> "TwoLayerMlp":
        w1 = rng.standard_normal((d_in, d_hidden)) / np.sqrt(d_in)
        w2 = output_scale * rng.standard_normal((d_hidden, d_out)) / np.sqrt(d_hidden)
        return cls(w1=w1, b1=np.zeros(d_hidden), w2=w2, b2=np.zeros(d_out))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(output, hidden_activation)``."""
        hidden = np.tanh(x @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2, hidden

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self, x: np.ndarray, hidden: np.ndarray, d_out: np.ndarray
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Returns ``(d_x, {"w1", "b1", "w2", "b2"})`` with leading axes summed."""
        x2 = x.reshape(-1, x.shape[-1])
        h2 = hidden.reshape(-1, hidden.shape[-1])
        do2 = d_out.reshape(-1, d_out.shape[-1])
        dh = (do2 @ self.w2.T) * (1.0 - h2 * h2)
        grads = {
            "w2": h2.T @ do2,
            "b2": do2.sum(axis=0),
            "w1": x2.T @ dh,
            "b1": dh.sum(axis=0),
        }
        dx = (dh @ self.w1.T).reshape(x.shape)
        return dx, grads


# ---------------------------------------------------------------------------
# Tensor dump format: raw little-endian f64 plus a JSON sidecar
# ---------------------------------------------------------------------------


def dump_tensor(base: Path | str, array: np.ndarray, extra: Optional[dict[str, Any]] = None) -> Path:
    """Write ``<base>.f64`` (little-endian, row-major) and a ``<base>.json`` sidecar.

    Args:
        base: Path without suffix; parent directories are created.
        array: Any array-like, 0-d included.
        extra: Additional sidecar keys.

    Returns:
        Path of the ``.f64`` data file.
    """
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    # 0-d groups (alpha_raw, beta_raw) keep shape ()
    arr = np.asarray(array, dtype="<f8")
    data_path = base.with_name(base.name + TENSOR_SUFFIX)
    data_path.write_bytes(arr.tobytes(order="C"))
    sidecar = {"shape": list(arr.shape), "order": "row-major", "dtype": "f64le"}
    if extra:
        sidecar.update(extra)
    base.with_name(base.name + SIDECAR_SUFFIX).write_text(
        json.dumps(sidecar, sort_keys=True), encoding="utf-8"
    )
    logger.debug("dumped tensor %s shape=%s", data_path, arr.shape)
    return data_path


def load_tensor(base: Path | str) -> tuple[np.ndarray, dict[str, Any]]:
    """Read a tensor written by :func:`dump_tensor`; returns ``(array, sidecar)``."""
    base = Path(base)
    sidecar = json.loads(base.with_name(base.name + SIDECAR_SUFFIX).read_text(encoding="utf-8"))
    if sidecar.get("dtype") != "f64le" or sidecar.get("order") != "row-major":
        raise ContractViolation(f"unsupported tensor sidecar for {base}: {sidecar}")
    raw = base.with_name(base.name + TENSOR_SUFFIX).read_bytes()
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    shape = tuple(sidecar["shape"])
    if int(np.prod(shape, dtype=np.int64)) != arr.size:
        raise ContractViolation(f"tensor {base} has {arr.size} values, sidecar says {shape}")
    return arr.reshape(shape), sidecar
