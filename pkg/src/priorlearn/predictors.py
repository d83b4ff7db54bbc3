"""Prior prediction functions.

Two families map task data to the mean of a Gaussian prior:

* ``CoeffMeanPredictor`` -- a task-independent mean, parameterized by its
  coefficients in a fixed reference eigenbasis.
* ``FnoPredictor`` -- a small Fourier neural operator (pure numpy, with
  hand-rolled backprop) applied to a lifted data field.

``CovarianceParams`` parameterizes the prior covariance eigenvalues as
lambda_k^2 = exp(theta2_k) on a fixed eigenbasis.

The spectral transforms inside the FNO are materialized as explicit real
matrices (built by applying numpy's ortho-normalized FFTs to unit vectors and
cached per grid size), so every gradient is plain real matrix algebra with the
exact FFT adjoint.  Ortho scaling makes the network discretization-invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .measures import SpectralCovariance
from .space import Field, Grid

__all__ = [
    "CoeffMeanPredictor",
    "FnoPredictor",
    "CovarianceParams",
    "predict_mean_independent",
    "fno_forward",
    "fno_backward",
    "covariance_from_params",
]


# ---------------------------------------------------------------------------
# coefficient-mean predictor and covariance parameters
# ---------------------------------------------------------------------------


@dataclass
class CoeffMeanPredictor:
    """Task-independent prior mean sum_k theta1_k b_k in a fixed basis."""

    basis: SpectralCovariance
    theta1: np.ndarray

    def __post_init__(self) -> None:
        self.theta1 = np.asarray(self.theta1, dtype=float)
        if self.theta1.shape != (self.basis.n_modes,):
            raise ValueError("theta1 must have one entry per basis mode")


def predict_mean_independent(predictor: CoeffMeanPredictor) -> Field:
    """The predicted prior mean (the same for every task)."""
    return predictor.basis.synth(predictor.theta1)


@dataclass
class CovarianceParams:
    """Prior covariance eigenvalues lambda_k^2 = exp(theta2_k)."""

    theta2: np.ndarray

    def __post_init__(self) -> None:
        self.theta2 = np.asarray(self.theta2, dtype=float)


def covariance_from_params(
    params: CovarianceParams, template: SpectralCovariance
) -> SpectralCovariance:
    """A covariance sharing the template's eigenbasis, with the leading
    len(theta2) eigenvalues replaced by exp(theta2) and the rest kept."""
    nc = params.theta2.shape[0]
    if nc > template.n_modes:
        raise ValueError("theta2 has more entries than template modes")
    lam2 = template.lam2.copy()
    lam2[:nc] = np.exp(params.theta2)
    return SpectralCovariance(
        template.grid,
        template.mass,
        template.eigvecs,
        lam2,
        template.bc,
    )


# ---------------------------------------------------------------------------
# spectral transform matrices (cached per grid)
# ---------------------------------------------------------------------------

_TRANSFORM_CACHE: dict[tuple, tuple] = {}


def _transforms_1d(n: int, modes: int):
    key = (1, n, modes)
    if key in _TRANSFORM_CACHE:
        return _TRANSFORM_CACHE[key]
    if modes > n // 2 + 1:
        raise ValueError(f"modes={modes} too large for {n} nodes")
    f_full = np.fft.rfft(np.eye(n), norm="ortho", axis=1).T[:modes]  # (S, n)
    n_rfft = n // 2 + 1
    b_re = np.empty((n, modes))
    b_im = np.empty((n, modes))
    for k in range(modes):
        c = np.zeros(n_rfft, dtype=complex)
        c[k] = 1.0
        b_re[:, k] = np.fft.irfft(c, n=n, norm="ortho")
        c[k] = 1.0j
        b_im[:, k] = np.fft.irfft(c, n=n, norm="ortho")
    out = (f_full.real.copy(), f_full.imag.copy(), b_re, b_im)
    _TRANSFORM_CACHE[key] = out
    return out


def _transforms_2d(n: int, modes: int):
    key = (2, n, modes)
    if key in _TRANSFORM_CACHE:
        return _TRANSFORM_CACHE[key]
    if 2 * modes > n or modes > n // 2 + 1:
        raise ValueError(f"modes={modes} too large for a {n}x{n} grid")
    # retained sites: ky in [0,modes) u [n-modes, n), kx in [0,modes)
    ky = np.concatenate([np.arange(modes), np.arange(n - modes, n)])
    kx = np.arange(modes)
    dft = np.fft.fft(np.eye(n), norm="ortho", axis=1).T  # (n, n): rows ky
    rft = np.fft.rfft(np.eye(n), norm="ortho", axis=1).T  # (n_rfft, n)
    # c[ky, kx] = sum_{iy,ix} D[ky,iy] R[kx,ix] s[iy,ix]; x-fastest nodes
    f_c = np.einsum("yi,xj->yxij", dft[ky], rft[kx]).reshape(
        2 * modes * modes, n * n
    )
    n_rfft = n // 2 + 1
    s = 2 * modes * modes
    b_re = np.empty((n * n, s))
    b_im = np.empty((n * n, s))
    c = np.zeros((n, n_rfft), dtype=complex)
    idx = 0
    for y in ky:
        for x in kx:
            c[y, x] = 1.0
            b_re[:, idx] = np.fft.irfft2(c, s=(n, n), norm="ortho").ravel()
            c[y, x] = 1.0j
            b_im[:, idx] = np.fft.irfft2(c, s=(n, n), norm="ortho").ravel()
            c[y, x] = 0.0
            idx += 1
    out = (f_c.real.copy(), f_c.imag.copy(), b_re, b_im)
    _TRANSFORM_CACHE[key] = out
    return out


def _transforms(grid: Grid, modes: int):
    if grid.dimension == 1:
        return _transforms_1d(grid.n_nodes, modes)
    return _transforms_2d(grid.nodes_per_axis, modes)


# ---------------------------------------------------------------------------
# the FNO
# ---------------------------------------------------------------------------

N_LAYERS = 3


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


@dataclass
class FnoPredictor:
    """A 3-layer Fourier neural operator mapping a data field to a mean field.

    Input channels: the data field plus the grid coordinates (2 channels in
    1D, 3 in 2D).  Each Fourier layer combines a spectral convolution over the
    retained low modes with a pointwise linear bypass; GELU follows the first
    two layers only.
    """

    dimension: int
    width: int
    modes: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def in_channels(self) -> int:
        return self.dimension + 1

    @property
    def n_sites(self) -> int:
        return self.modes if self.dimension == 1 else 2 * self.modes**2

    def init_params(self, rng: np.random.Generator) -> None:
        w, s = self.width, self.n_sites
        spec_std = np.sqrt(1.0 / (w * self.modes))
        self.params = {
            "lift_w": rng.normal(0.0, np.sqrt(1.0 / self.in_channels),
                                 (w, self.in_channels)),
            "lift_b": np.zeros(w),
            "proj_w": rng.normal(0.0, np.sqrt(1.0 / w), (1, w)),
            "proj_b": np.zeros(1),
        }
        for i in range(N_LAYERS):
            self.params[f"spec{i}_re"] = rng.normal(0.0, spec_std, (w, w, s))
            self.params[f"spec{i}_im"] = rng.normal(0.0, spec_std, (w, w, s))
            self.params[f"w{i}"] = rng.normal(0.0, np.sqrt(1.0 / w), (w, w))
            self.params[f"b{i}"] = np.zeros(w)

    # -- flat parameter vector ------------------------------------------------

    def param_names(self) -> list[str]:
        return sorted(self.params.keys())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def from_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for k in self.param_names():
            sz = self.params[k].size
            self.params[k] = vec[pos : pos + sz].reshape(self.params[k].shape)
            pos += sz
        if pos != vec.size:
            raise ValueError("parameter vector has the wrong length")


def fno_forward(
    predictor: FnoPredictor, data: Field, *, return_cache: bool = False
):
    """Evaluate the operator on a data field; optionally keep the tape."""
    grid = data.grid
    if grid.dimension != predictor.dimension:
        raise ValueError("grid dimension does not match the predictor")
    f_re, f_im, b_re, b_im = _transforms(grid, predictor.modes)
    p = predictor.params
    inp = np.vstack([data.values[None, :], grid.coords().T])  # (C_in, Nn)
    x = p["lift_w"] @ inp + p["lift_b"][:, None]
    cache = {"inp": inp, "x0": x, "grid": grid}
    for i in range(N_LAYERS):
        re = x @ f_re.T  # (w, S)
        im = x @ f_im.T
        a_re, a_im = p[f"spec{i}_re"], p[f"spec{i}_im"]
        yre = np.einsum("ois,is->os", a_re, re) - np.einsum(
            "ois,is->os", a_im, im
        )
        yim = np.einsum("ois,is->os", a_re, im) + np.einsum(
            "ois,is->os", a_im, re
        )
        sp = yre @ b_re.T + yim @ b_im.T
        z = sp + p[f"w{i}"] @ x + p[f"b{i}"][:, None]
        cache[f"re{i}"], cache[f"im{i}"] = re, im
        cache[f"z{i}"] = z
        x = _gelu(z) if i < N_LAYERS - 1 else z
        cache[f"x{i + 1}"] = x
    out = p["proj_w"] @ x + p["proj_b"][:, None]
    result = Field(grid, out[0])
    if return_cache:
        return result, cache
    return result


def fno_backward(
    predictor: FnoPredictor, cache: dict, cotangent: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of <output, cotangent> (Euclidean nodal pairing) w.r.t. the
    parameters.  Callers wanting an M-weighted pairing pass M times their
    cotangent field."""
    grid = cache["grid"]
    f_re, f_im, b_re, b_im = _transforms(grid, predictor.modes)
    p = predictor.params
    grads: dict[str, np.ndarray] = {}
    cot = np.asarray(cotangent, dtype=float)[None, :]  # (1, Nn)

    x_last = cache[f"x{N_LAYERS}"]
    grads["proj_w"] = cot @ x_last.T
    grads["proj_b"] = cot.sum(axis=1)
    gx = p["proj_w"].T @ cot  # (w, Nn)

    for i in reversed(range(N_LAYERS)):
        z = cache[f"z{i}"]
        gz = gx * _gelu_grad(z) if i < N_LAYERS - 1 else gx
        x_in = cache[f"x{i}"]
        grads[f"w{i}"] = gz @ x_in.T
        grads[f"b{i}"] = gz.sum(axis=1)
        g_yre = gz @ b_re  # (w, S)
        g_yim = gz @ b_im
        re, im = cache[f"re{i}"], cache[f"im{i}"]
        a_re, a_im = p[f"spec{i}_re"], p[f"spec{i}_im"]
        grads[f"spec{i}_re"] = np.einsum("os,is->ois", g_yre, re) + np.einsum(
            "os,is->ois", g_yim, im
        )
        grads[f"spec{i}_im"] = np.einsum("os,is->ois", g_yim, re) - np.einsum(
            "os,is->ois", g_yre, im
        )
        g_re = np.einsum("ois,os->is", a_re, g_yre) + np.einsum(
            "ois,os->is", a_im, g_yim
        )
        g_im = np.einsum("ois,os->is", a_re, g_yim) - np.einsum(
            "ois,os->is", a_im, g_yre
        )
        gx = g_re @ f_re + g_im @ f_im + p[f"w{i}"].T @ gz

    grads["lift_w"] = gx @ cache["inp"].T
    grads["lift_b"] = gx.sum(axis=1)
    return grads
