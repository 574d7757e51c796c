"""Rotary position encodings with a learnable spectrum.

A :class:`SpectralBasis` holds per-pair frequency ``omega``, gain
``amplitude`` and per-side ``phase`` vectors. Consecutive feature pairs
(x[2j], x[2j+1]) are treated as complex numbers and multiplied by
``amplitude[j] * exp(i*(m*omega[j] + phase[j]))`` at position m. With
amplitude fixed at one, phases at zero, and geometrically spaced
frequencies this reduces to standard rotary embedding, so the fixed
engine and the learnable engine share one kernel.

Phases default to a single vector shared between the query and key
sides. A shared phase cancels out of every attention score (the score
angle is m*omega + phase_q - (n*omega + phase_k)), so an untied mode
with independent per-side vectors is available for experiments where
the phase should be able to matter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class RotationEngineKind(enum.Enum):
    STANDARD = "standard"
    SPECTRAL = "spectral"


PHASE_NOISE_STD = 1e-3


@dataclass
class SpectralBasis:
    """Learnable rotation spectrum for one attention layer.

    All four vectors have length d/2 where d is the head dimension.
    ``phase_q`` and ``phase_k`` are the same Tensor object when tied.
    """

    omega: Tensor
    amplitude: Tensor
    phase_q: Tensor
    phase_k: Tensor
    trainable_omega: bool = False
    trainable_amplitude: bool = False
    trainable_phase: bool = False

    def __post_init__(self):
        n = self.omega.shape
        if not (self.amplitude.shape == n and self.phase_q.shape == n
                and self.phase_k.shape == n):
            raise T.ShapeError(
                f"basis vectors disagree: omega {self.omega.shape}, amplitude "
                f"{self.amplitude.shape}, phase_q {self.phase_q.shape}, phase_k {self.phase_k.shape}")
        if len(n) != 1 or n[0] < 1:
            raise T.ShapeError(f"basis vectors must be non-empty 1-D, got shape {n}")
        self.omega.requires_grad = self.trainable_omega
        self.amplitude.requires_grad = self.trainable_amplitude
        self.phase_q.requires_grad = self.trainable_phase
        self.phase_k.requires_grad = self.trainable_phase

    @property
    def n_pairs(self) -> int:
        return self.omega.shape[0]

    @property
    def dim(self) -> int:
        return 2 * self.n_pairs

    @property
    def tied(self) -> bool:
        return self.phase_q is self.phase_k

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable (name, tensor) pairs; a tied phase appears once."""
        out = []
        if self.trainable_omega:
            out.append(("omega", self.omega))
        if self.trainable_amplitude:
            out.append(("amplitude", self.amplitude))
        if self.trainable_phase:
            out.append(("phase_q", self.phase_q))
            if not self.tied:
                out.append(("phase_k", self.phase_k))
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All four vectors by canonical name (tied phase listed twice)."""
        return [("omega", self.omega.data), ("amplitude", self.amplitude.data),
                ("phase_q", self.phase_q.data), ("phase_k", self.phase_k.data)]

    def clone(self) -> "SpectralBasis":
        """Deep copy of values and flags, preserving phase tying."""
        pq = Tensor(self.phase_q.data.copy())
        pk = pq if self.tied else Tensor(self.phase_k.data.copy())
        return SpectralBasis(Tensor(self.omega.data.copy()),
                             Tensor(self.amplitude.data.copy()), pq, pk,
                             trainable_omega=self.trainable_omega,
                             trainable_amplitude=self.trainable_amplitude,
                             trainable_phase=self.trainable_phase)


def geometric_init(d: int, base: float = 10000.0, mode: str = "surgical",
                   untied: bool = False, trainable: bool = False,
                   rng: Optional[np.random.Generator] = None) -> SpectralBasis:
    """Basis with omega[i] = base**(-2i/d), unit amplitude.

    ``mode="surgical"`` pins the phases at exactly zero so a build with
    this basis is interchangeable with a fixed-rotation build. In
    ``mode="training"`` the phases get N(0, 1e-3) noise to break the
    symmetry of the all-zero start; an rng is required then.
    """
    if d < 2 or d % 2 != 0:
        raise ValueError(f"head dimension must be even and >= 2, got {d}")
    if base <= 0:
        raise ValueError(f"rotation base must be positive, got {base}")
    if mode not in ("surgical", "training"):
        raise ValueError(f"unknown init mode {mode!r}")
    n = d // 2
    omega = base ** (-2.0 * np.arange(n) / d)
    amplitude = np.ones(n)
    if mode == "training":
        if rng is None:
            raise ValueError("training mode init needs an rng for phase noise")
        pq = rng.normal(0.0, PHASE_NOISE_STD, size=n)
        pk = rng.normal(0.0, PHASE_NOISE_STD, size=n) if untied else pq
    else:
        pq = np.zeros(n)
        pk = np.zeros(n) if untied else pq
    phase_q = Tensor(pq)
    phase_k = phase_q if pk is pq else Tensor(pk)
    return SpectralBasis(Tensor(omega), Tensor(amplitude), phase_q, phase_k,
                         trainable_omega=trainable, trainable_amplitude=trainable,
                         trainable_phase=trainable)


def spectral_rotate(x: Tensor, positions: np.ndarray, basis: SpectralBasis,
                    side: str) -> Tensor:
    """Rotate feature pairs of x (..., seq, d) by position-dependent angles.

    Differentiable w.r.t. x, omega, amplitude, and the chosen side's phase.
    """
    if side == "q":
        phase = basis.phase_q
    elif side == "k":
        phase = basis.phase_k
    else:
        raise ValueError(f"side must be 'q' or 'k', got {side!r}")
    if x.data.ndim < 2 or x.shape[-1] != basis.dim:
        raise T.ShapeError(
            f"spectral_rotate: input shape {x.shape} does not end in basis dim {basis.dim}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[-2]:
        raise T.ShapeError(
            f"spectral_rotate: positions shape {positions.shape} does not match seq {x.shape[-2]}")
    if positions.size and positions.min() < 0:
        raise ValueError("spectral_rotate: positions must be non-negative")

    # The interleaved (2j, 2j+1) pair layout is exactly complex128 layout,
    # so the whole rotation is one complex multiply per element: contiguous
    # passes instead of stride-2 slicing over even/odd lanes.
    pos = positions.astype(np.float64)
    angles = pos[:, None] * basis.omega.data[None, :] + phase.data[None, :]
    rot = np.empty(angles.shape, dtype=np.complex128)
    np.cos(angles, out=rot.real)
    np.sin(angles, out=rot.imag)
    amp = basis.amplitude.data
    z = np.ascontiguousarray(x.data).view(np.complex128)
    w = z * rot                       # unscaled rotation, kept for backward
    out = (w * amp).view(np.float64)

    basis_live = (basis.omega.requires_grad or basis.amplitude.requires_grad
                  or phase.requires_grad)

    def bwd(g):
        gz = np.ascontiguousarray(g).view(np.complex128)
        gx = np.conj(rot) * gz
        gx *= amp
        if not basis_live:            # frozen basis: skip the parameter grads
            return gx.view(np.float64), None, None, None
        reduce_axes = tuple(range(g.ndim - 1))
        u = np.conj(gz)
        u *= w                        # u = conj(gz) * w
        g_amp = u.real.sum(axis=reduce_axes)
        g_theta = u.imag
        g_theta *= -amp               # amp * (go*re - ge*ro) per pair
        g_phase = g_theta.sum(axis=reduce_axes)
        g_theta *= pos[:, None]
        g_omega = g_theta.sum(axis=reduce_axes)
        return gx.view(np.float64), g_omega, g_amp, g_phase

    return T.record_op(out, (x, basis.omega, basis.amplitude, phase), bwd,
                       "spectral_rotate")


def pairwise_score(q: Tensor, k: Tensor, m: int, n: int,
                   basis: SpectralBasis) -> Tensor:
    """Scalar ⟨rotate(q, m, q-side), rotate(k, n, k-side)⟩, differentiable.

    With tied phases and unit amplitude this equals the real part of
    sum_j q_j conj(k_j) exp(i (m-n) omega_j), a function of m-n only.
    """
    if q.shape != (basis.dim,) or k.shape != (basis.dim,):
        raise T.ShapeError(
            f"pairwise_score: vectors {q.shape}/{k.shape} do not match basis dim {basis.dim}")
    rq = spectral_rotate(T.reshape(q, (1, basis.dim)), np.array([m]), basis, "q")
    rk = spectral_rotate(T.reshape(k, (1, basis.dim)), np.array([n]), basis, "k")
    return T.sum_all(T.mul(rq, rk))


def resonance_frequencies(N: int, k_max: int) -> np.ndarray:
    """Frequencies 2*pi*k/N, k = 1..k_max; each satisfies cos(w*N) == 1."""
    if N < 1 or k_max < 1:
        raise ValueError(f"need N >= 1 and k_max >= 1, got N={N}, k_max={k_max}")
    return 2.0 * math.pi * np.arange(1, k_max + 1) / N


@dataclass
class MismatchReport:
    """How well each basis frequency completes whole cycles over distance N."""

    N: int
    cosines: np.ndarray = field(repr=False)  # cos(omega[i] * N) per pair index
    best: float = 0.0
    best_index: int = 0


def mismatch_report(basis: SpectralBasis, N: int) -> MismatchReport:
    if N < 1:
        raise ValueError(f"distance N must be >= 1, got {N}")
    cosines = np.cos(basis.omega.data * N)
    idx = int(np.argmax(cosines))
    return MismatchReport(N=N, cosines=cosines, best=float(cosines[idx]), best_index=idx)
