"""Linear plant model, structural tests and the real Jordan decomposition."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg as sla

# Relative cutoff for treating a matrix entry / singular value as zero.
ZERO_TOL = 1e-9
# Eigenvalues closer than this belong to the same Jordan chain.
CLUSTER_TOL = 1e-8
# Acceptable residual for V A V^-1 - Lambda R.
DECOMP_TOL = 1e-9


class StructureError(ValueError):
    """Raised when a model fails a structural precondition."""


def _as_matrix(a: Any, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix")
    return m


@dataclass(frozen=True)
class StateSpaceModel:
    """X_{t+1} = A X_t + B_u U_t + B_w W_t,  Y_t = C_y X_t + N_t.

    ``omega``, ``gamma`` and ``omega0`` are the widths of the disturbance,
    observation-noise and initial-condition boxes: ||W|| <= omega/2 etc.
    """

    A: np.ndarray
    B_u: np.ndarray
    B_w: np.ndarray
    C_y: np.ndarray
    omega: float = 1.0
    gamma: float = 0.0
    omega0: float = 0.0

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B_u = _as_matrix(self.B_u, "B_u")
        B_w = _as_matrix(self.B_w, "B_w")
        C_y = _as_matrix(self.C_y, "C_y")
        n = A.shape[0]
        if n < 1 or A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B_u.shape[0] != n:
            raise ValueError(f"B_u has {B_u.shape[0]} rows, expected {n}")
        if B_w.shape[0] != n:
            raise ValueError(f"B_w has {B_w.shape[0]} rows, expected {n}")
        if C_y.shape[1] != n:
            raise ValueError(f"C_y has {C_y.shape[1]} columns, expected {n}")
        for name in ("omega", "gamma", "omega0"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name, m in (("A", A), ("B_u", B_u), ("B_w", B_w), ("C_y", C_y)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def m_w(self) -> int:
        return self.B_w.shape[1]

    @property
    def m_y(self) -> int:
        return self.C_y.shape[0]

    @classmethod
    def full_actuation(cls, A, omega: float = 1.0, gamma: float = 0.0, omega0: float = 0.0):
        """Model with identity B_u, B_w and C_y."""
        A = _as_matrix(A, "A")
        eye = np.eye(A.shape[0])
        return cls(A, eye, eye, eye, omega, gamma, omega0)

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B_u": self.B_u.tolist(),
            "B_w": self.B_w.tolist(),
            "C_y": self.C_y.tolist(),
            "omega": self.omega,
            "gamma": self.gamma,
            "omega0": self.omega0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpaceModel":
        allowed = {"A", "B_u", "B_w", "C_y", "omega", "gamma", "omega0"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        A = _as_matrix(d["A"], "A")
        eye = np.eye(A.shape[0])
        return cls(
            A,
            d.get("B_u", eye),
            d.get("B_w", eye),
            d.get("C_y", eye),
            float(d.get("omega", 1.0)),
            float(d.get("gamma", 0.0)),
            float(d.get("omega0", 0.0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "StateSpaceModel":
        return cls.from_dict(json.loads(text))


def step(model: StateSpaceModel, x, u, w) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    w = np.asarray(w, dtype=float).reshape(-1)
    if x.size != model.n or u.size != model.m_u or w.size != model.m_w:
        raise ValueError(
            f"dimension mismatch: x={x.size}/{model.n}, u={u.size}/{model.m_u}, w={w.size}/{model.m_w}"
        )
    return model.A @ x + model.B_u @ u + model.B_w @ w


def observe(model: StateSpaceModel, x, nnoise) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    nnoise = np.asarray(nnoise, dtype=float).reshape(-1)
    if x.size != model.n or nnoise.size != model.m_y:
        raise ValueError("dimension mismatch in observe")
    if nnoise.size and np.max(np.abs(nnoise)) > model.gamma / 2 + 1e-12:
        raise ValueError(
            f"observation noise {np.max(np.abs(nnoise))} exceeds gamma/2 = {model.gamma / 2}"
        )
    return model.C_y @ x + nnoise


def _is_nonzero(m: np.ndarray, scale: float) -> bool:
    return bool(np.max(np.abs(m), initial=0.0) > ZERO_TOL * max(scale, np.finfo(float).tiny))


def intrinsic_delay(model: StateSpaceModel) -> int:
    """Smallest i >= 0 with C_y A^i B_u != 0."""
    A, B, C = model.A, model.B_u, model.C_y
    cb, bb = np.max(np.abs(C)), np.max(np.abs(B))
    Ai = np.eye(model.n)
    for i in range(model.n):
        scale = cb * bb * max(np.max(np.abs(Ai)), 1.0)
        if _is_nonzero(C @ Ai @ B, scale):
            return i
        Ai = Ai @ A
    raise StructureError("no input-output path: C_y A^i B_u = 0 for all i < n")


def numerical_rank(M: np.ndarray) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > ZERO_TOL * s[0]))


def controllability_matrix(A, B) -> np.ndarray:
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    blocks = [B]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def observability_matrix(A, C) -> np.ndarray:
    A = _as_matrix(A, "A")
    C = _as_matrix(C, "C")
    blocks = [C]
    for _ in range(A.shape[0] - 1):
        blocks.append(blocks[-1] @ A)
    return np.vstack(blocks)


def is_reachable(A, B) -> bool:
    return numerical_rank(controllability_matrix(A, B)) == _as_matrix(A, "A").shape[0]


def is_observable(A, C) -> bool:
    return numerical_rank(observability_matrix(A, C)) == _as_matrix(A, "A").shape[0]


@dataclass(frozen=True)
class JordanBlock:
    magnitude: float
    size: int  # state dimensions occupied (2 per complex pair)
    angle: float | None  # None for real eigenvalues; sign of a real negative eigenvalue -> pi
    start: int  # first index in the transformed coordinates


@dataclass(frozen=True)
class RealJordanForm:
    """V A V^-1 = Lambda R with Lambda block upper-triangular, R block rotations."""

    V: np.ndarray
    Lambda: np.ndarray
    R: np.ndarray
    blocks: list[JordanBlock] = field(default_factory=list)

    @property
    def V_inv(self) -> np.ndarray:
        return np.linalg.inv(self.V)

    def residual(self, A) -> float:
        A = _as_matrix(A, "A")
        return float(np.max(np.abs(self.V @ A @ self.V_inv - self.Lambda @ self.R)))


@dataclass(frozen=True)
class EigenSpectrum:
    unstable: list[complex]
    magnitudes: list[float]
    log_magnitudes: list[float]


def _clusters(eigs: np.ndarray) -> list[list[complex]]:
    """Group eigenvalues (upper half-plane representatives only) within CLUSTER_TOL."""
    groups: list[list[complex]] = []
    for lam in sorted(eigs, key=lambda z: (-abs(z), -z.real, -z.imag)):
        for g in groups:
            if abs(g[0] - lam) <= CLUSTER_TOL * max(1.0, abs(lam)):
                g.append(lam)
                break
        else:
            groups.append([lam])
    return groups


def _null_basis(M: np.ndarray, dim: int) -> np.ndarray:
    """Right singular vectors for the ``dim`` smallest singular values."""
    _, _, vh = np.linalg.svd(M)
    return vh[-dim:].conj().T


def real_jordan(A) -> RealJordanForm:
    """Real block decomposition with upper-triangular magnitude blocks and rotations.

    Real eigenvalue clusters become upper-triangular blocks with a constant
    diagonal (a negative real eigenvalue is split into |lambda| times a
    rotation by pi). Complex pairs become 2x2 scaling-rotation blocks;
    defective complex clusters are not supported.
    """
    A = _as_matrix(A, "A")
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    eigs = np.linalg.eigvals(A)
    # keep one representative per conjugate pair
    reps = [complex(z) for z in eigs if z.imag >= -CLUSTER_TOL * max(1.0, abs(z))]
    reps = [complex(z.real, 0.0) if abs(z.imag) <= CLUSTER_TOL * max(1.0, abs(z)) else z for z in reps]

    bases: list[np.ndarray] = []
    blocks: list[JordanBlock] = []
    rot_parts: list[np.ndarray] = []
    start = 0
    for group in _clusters(np.array(reps)):
        lam = complex(np.mean(group))
        m = len(group)
        if lam.imag == 0.0:
            lr = lam.real
            basis = _null_basis(np.linalg.matrix_power(A - lr * np.eye(n), m), m).real
            # orthonormal basis -> Schur form inside the invariant subspace
            basis, _ = np.linalg.qr(basis)
            sub = np.linalg.lstsq(basis, A @ basis, rcond=None)[0]
            T, Z = sla.schur(sub, output="real")
            basis = basis @ Z
            mag = abs(lr)
            sign = 1.0 if lr >= 0 else -1.0
            rot_parts.append(sign * np.eye(m))
            bases.append(basis)
            blocks.append(JordanBlock(mag, m, None if lr >= 0 else np.pi, start))
            start += m
        else:
            Mc = A - lam * np.eye(n)
            vecs = _null_basis(Mc, m)
            if np.linalg.svd(Mc @ vecs, compute_uv=False)[0] > 1e-6 * max(1.0, abs(lam)):
                raise StructureError("defective complex eigenvalue clusters are not supported")
            mag, ang = abs(lam), float(np.angle(lam))
            rot = np.array([[np.cos(ang), np.sin(ang)], [-np.sin(ang), np.cos(ang)]])
            for k in range(m):
                v = vecs[:, k]
                # B[p q] = [p q] [[a, b], [-b, a]] for B(p + iq) = (a + ib)(p + iq)
                bases.append(np.column_stack([v.real, v.imag]))
                rot_parts.append(rot)
                blocks.append(JordanBlock(mag, 2, ang, start))
                start += 2
    if start != n:
        raise StructureError(f"eigen-structure not resolvable: recovered {start} of {n} dimensions")
    # one scale per block keeps the rotation structure of complex pairs intact
    V_inv = np.hstack([b / np.max(np.abs(b)) for b in bases])
    V = np.linalg.inv(V_inv)
    R = sla.block_diag(*rot_parts)
    # read Lambda off the transformed matrix so the residual stays at round-off
    Lambda = _block_part(V @ A @ V_inv @ R.T, blocks)
    jf = RealJordanForm(V, Lambda, R, blocks)
    res = jf.residual(A)
    if res > DECOMP_TOL * max(1.0, np.max(np.abs(A))) * 10:
        raise StructureError(f"real Jordan decomposition residual {res:.3g} too large")
    return jf


def _block_part(M: np.ndarray, blocks: list[JordanBlock]) -> np.ndarray:
    out = np.zeros_like(M)
    for b in blocks:
        s = slice(b.start, b.start + b.size)
        out[s, s] = M[s, s]
    return out


def rotating_frame(k: int, jf: RealJordanForm, x) -> np.ndarray:
    """R^-k V x (R is orthogonal so R^-k = (R^T)^k)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    return np.linalg.matrix_power(jf.R.T, k) @ (jf.V @ x)


def unstable_spectrum(A) -> EigenSpectrum:
    A = _as_matrix(A, "A")
    eigs = np.linalg.eigvals(A)
    unstable = sorted((complex(z) for z in eigs if abs(z) > 1.0), key=lambda z: -abs(z))
    mags = [abs(z) for z in unstable]
    return EigenSpectrum(unstable, mags, [float(np.log2(m)) for m in mags])
