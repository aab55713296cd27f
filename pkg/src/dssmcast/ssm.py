"""Diagonal linear and extended Kalman filter cells with learned noise.

Every covariance-like object (transition, process noise, measurement noise,
state covariance, EKF Jacobians) is diagonal, so it is carried as a vector of
its diagonal and the gain's matrix inverse reduces to an elementwise division.
``dense_kf_oracle`` runs the same linear recursion with full matrices and a
real inverse to check that reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _core
from .ndiff import Tensor, clamp_min, from_op, matmul, softplus, stack

NOISE_FLOOR = 1e-4
VAR_FLOOR = 1e-10

Coefs = tuple[Tensor, Tensor, Tensor]


@dataclass
class KalmanState:
    """Posterior mean and diagonal covariance, ``K`` or ``B x K``."""

    mean: Tensor
    cov_diag: Tensor

    @classmethod
    def initial(cls, dk: int, batch: int | None = None, mean: float = 0.0, var: float = 1.0):
        shape = (dk,) if batch is None else (batch, dk)
        return cls(Tensor(np.full(shape, mean)), Tensor(np.full(shape, var)))


@dataclass
class LkfParams:
    gamma: Tensor
    lambda_raw: Tensor

    @classmethod
    def init(cls, dk: int) -> "LkfParams":
        # identity transition, softplus(0) process noise
        return cls(Tensor(np.ones(dk), requires_grad=True), Tensor(np.zeros(dk), requires_grad=True))

    def process_noise(self) -> Tensor:
        return softplus(self.lambda_raw) + NOISE_FLOOR

    def tensors(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "lambda_raw": self.lambda_raw}


@dataclass
class EkfParams:
    """Affine heads producing quadratic coefficients for the transition and measurement maps.

    ``coef_f_w`` is ``K x 3K``; its output splits into the constant, linear and
    quadratic coefficient vectors, in that order.  Same for ``coef_h_w``.
    """

    coef_f_w: Tensor
    coef_f_b: Tensor
    coef_h_w: Tensor
    coef_h_b: Tensor
    lambda_raw: Tensor

    @classmethod
    def init(cls, dk: int) -> "EkfParams":
        linear = np.concatenate([np.zeros(dk), np.ones(dk), np.zeros(dk)])
        return cls(
            Tensor(np.zeros((dk, 3 * dk)), requires_grad=True),
            Tensor(linear, requires_grad=True),
            Tensor(np.zeros((dk, 3 * dk)), requires_grad=True),
            Tensor(linear.copy(), requires_grad=True),
            Tensor(np.zeros(dk), requires_grad=True),
        )

    def process_noise(self) -> Tensor:
        return softplus(self.lambda_raw) + NOISE_FLOOR

    def coef_f(self, x: Tensor) -> Coefs:
        return _split3(matmul(_as_rows(x), self.coef_f_w) + self.coef_f_b, x)

    def coef_h(self, x: Tensor) -> Coefs:
        return _split3(matmul(_as_rows(x), self.coef_h_w) + self.coef_h_b, x)

    def tensors(self) -> dict[str, Tensor]:
        return {
            "coef_f_w": self.coef_f_w,
            "coef_f_b": self.coef_f_b,
            "coef_h_w": self.coef_h_w,
            "coef_h_b": self.coef_h_b,
            "lambda_raw": self.lambda_raw,
        }


def _as_rows(x: Tensor) -> Tensor:
    return x.reshape(1, x.shape[0]) if x.ndim == 1 else x


def _split3(out: Tensor, like: Tensor) -> Coefs:
    k = out.shape[-1] // 3
    parts = (out[..., :k], out[..., k : 2 * k], out[..., 2 * k :])
    if like.ndim == 1:
        parts = tuple(p.reshape(k) for p in parts)
    return parts


# -- elementwise quadratic maps -----------------------------------------
def quad_eval(x, a0, a1, a2):
    """a0 + a1*x + a2*x**2, elementwise (arrays or Tensors)."""
    return a0 + a1 * x + a2 * (x * x)


def quad_jacobian_diag(x, a1, a2):
    """Diagonal of the Jacobian of :func:`quad_eval` with respect to ``x``."""
    return a1 + 2.0 * a2 * x


# -- single steps ----------------------------------------------------------
def _check_noise(l) -> None:
    data = l.data if isinstance(l, Tensor) else np.asarray(l)
    if np.any(data <= 0.0):
        raise ValueError("measurement noise l_t must be strictly positive")


def lkf_step(state: KalmanState, z, l, gamma, lam) -> tuple[KalmanState, Tensor]:
    """One predict/update cycle of the diagonal linear filter (H = I)."""
    _check_noise(l)
    prior_mean = gamma * state.mean
    prior_var = gamma * gamma * state.cov_diag + lam
    gain = prior_var / (prior_var + l)
    mean = prior_mean + gain * (z - prior_mean)
    # (1 - K) P written as P R / S: same value, never negative, exact on dyadic inputs
    var = prior_var * l / (prior_var + l)
    return KalmanState(mean, var), gain


def ekf_step(
    state: KalmanState,
    z,
    l,
    lam,
    coef_f: Callable[[Tensor], Coefs],
    coef_h: Callable[[Tensor], Coefs],
    stats: dict | None = None,
) -> tuple[KalmanState, Tensor]:
    """One predict/update cycle of the diagonal extended filter with quadratic maps.

    Posterior variances at or below ``VAR_FLOOR`` (possible only for vanishing
    measurement noise) are set to ``VAR_FLOOR``; the number of floored entries
    is added to ``stats["floor_events"]``.
    """
    _check_noise(l)
    a0, a1, a2 = coef_f(state.mean)
    prior_mean = quad_eval(state.mean, a0, a1, a2)
    jf = quad_jacobian_diag(state.mean, a1, a2)
    prior_var = jf * jf * state.cov_diag + lam
    b0, b1, b2 = coef_h(prior_mean)
    jh = quad_jacobian_diag(prior_mean, b1, b2)
    s = jh * jh * prior_var + l
    gain = prior_var * jh / s
    mean = prior_mean + gain * (z - quad_eval(prior_mean, b0, b1, b2))
    var_raw = prior_var * l / s  # == (1 - K jh) P
    var = clamp_min(var_raw, VAR_FLOOR) if isinstance(var_raw, Tensor) else np.maximum(var_raw, VAR_FLOOR)
    if stats is not None:
        raw = var_raw.data if isinstance(var_raw, Tensor) else np.asarray(var_raw)
        stats["floor_events"] = stats.get("floor_events", 0) + int(np.sum(raw <= VAR_FLOOR))
    return KalmanState(mean, var), gain


def constant_coefs(c0: float, c1: float, c2: float) -> Callable[[Tensor], Coefs]:
    """Coefficient source that ignores its input; handy for fixed quadratic maps."""

    def coefs(x):
        shape = x.shape
        return (
            Tensor(np.full(shape, c0)),
            Tensor(np.full(shape, c1)),
            Tensor(np.full(shape, c2)),
        )

    return coefs


# -- filtering over a window ---------------------------------------------
@dataclass
class FilterResult:
    final: KalmanState
    means: Tensor
    gains: Tensor
    floor_events: int = 0


def run_filter(
    z: Tensor,
    l: Tensor,
    params: LkfParams | EkfParams,
    init: KalmanState | None = None,
    variant: str = "lkf",
    fused: bool = True,
    kernels=None,
) -> FilterResult:
    """Fold the filter over ``T`` steps.

    ``z`` and ``l`` are ``T x K`` or ``B x T x K``.  With ``fused=True`` the
    whole scan runs as a single differentiable op backed by the compiled (or
    numpy) kernels; ``fused=False`` chains the per-step Tensor ops instead.
    """
    variant = variant.lower()
    if variant not in ("lkf", "ekf"):
        raise ValueError(f"variant must be 'lkf' or 'ekf', got {variant!r}")
    if (variant == "lkf") != isinstance(params, LkfParams):
        raise TypeError(f"params of type {type(params).__name__} do not match variant {variant!r}")
    if z.shape != l.shape or z.ndim not in (2, 3):
        raise ValueError(f"z {z.shape} and l {l.shape} must share a T x K or B x T x K shape")
    if z.shape[-2] < 1:
        raise ValueError("run_filter needs at least one timestep")
    _check_noise(l)
    single = z.ndim == 2
    if single:
        z = z.reshape(1, *z.shape)
        l = l.reshape(1, *l.shape)
    B, T, K = z.shape
    if init is None:
        init = KalmanState.initial(K)
    m0 = _batch_init(init.mean, B)
    v0 = _batch_init(init.cov_diag, B)
    lam = params.process_noise()

    if fused:
        kern = kernels or _core.kernels
        if variant == "lkf":
            packed, floors = _fused_lkf(kern, z, l, params.gamma, lam, m0, v0)
        else:
            packed, floors = _fused_ekf(kern, z, l, lam, params, m0, v0)
        means = packed[..., 0]
        gains = packed[..., 2]
        final = KalmanState(packed[:, T - 1, :, 0], packed[:, T - 1, :, 1])
    else:
        state = KalmanState(m0, v0)
        mean_seq, gain_seq = [], []
        stats: dict = {}
        for t in range(T):
            zt, lt = z[:, t], l[:, t]
            if variant == "lkf":
                state, gain = lkf_step(state, zt, lt, params.gamma, lam)
            else:
                state, gain = ekf_step(state, zt, lt, lam, params.coef_f, params.coef_h, stats)
            mean_seq.append(state.mean)
            gain_seq.append(gain)
        means = stack(mean_seq, axis=1)
        gains = stack(gain_seq, axis=1)
        final = state
        floors = stats.get("floor_events", 0)

    if single:
        means = means.reshape(T, K)
        gains = gains.reshape(T, K)
        final = KalmanState(final.mean.reshape(K), final.cov_diag.reshape(K))
    return FilterResult(final, means, gains, floors)


def _batch_init(x: Tensor, batch: int) -> Tensor:
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]) + Tensor(np.zeros((batch, x.shape[0])))
    return x


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _fused_lkf(kern, z, l, gamma, lam, m0, v0):
    args = [_c(t.data) for t in (z, l, gamma, lam, m0, v0)]
    saved = kern.lkf_forward(*args)
    packed = np.stack([saved[3], saved[4], saved[2]], axis=-1)

    def backward(g):
        gz, gl, g_gamma, g_lam, gm0, gv0 = kern.lkf_backward(
            *args, saved, _c(g[..., 0]), _c(g[..., 1]), _c(g[..., 2])
        )
        return gz, gl, g_gamma, g_lam, gm0, gv0

    return from_op(packed, (z, l, gamma, lam, m0, v0), backward, "lkf_scan"), 0


def _fused_ekf(kern, z, l, lam, params: EkfParams, m0, v0):
    parents = (z, l, lam, params.coef_f_w, params.coef_f_b, params.coef_h_w, params.coef_h_b, m0, v0)
    args = [_c(t.data) for t in parents]
    saved = kern.ekf_forward(*args, VAR_FLOOR)
    packed = np.stack([saved[5], saved[6], saved[4]], axis=-1)
    floors = int(np.asarray(saved[7]).sum())

    def backward(g):
        return kern.ekf_backward(*args, saved, _c(g[..., 0]), _c(g[..., 1]), _c(g[..., 2]))

    return from_op(packed, parents, backward, "ekf_scan"), floors


# -- dense reference ---------------------------------------------------------
def dense_kf_oracle(z, l, gamma, lam, init_mean=None, init_var=None):
    """Linear Kalman filter with full matrices and an explicit inverse.

    Parameters
    ----------
    z, l : (T, K) array_like
        Observations and measurement-noise diagonals.
    gamma, lam : (K,) array_like
        Transition diagonal and process-noise diagonal.
    init_mean, init_var : (K,) array_like, optional
        Initial posterior; defaults to zeros and ones.

    Returns
    -------
    means, variances, gains : (T, K) ndarray
        Posterior means, diagonals of the posterior covariances and diagonals
        of the gain matrices.
    """
    z = np.asarray(z, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    T, K = z.shape
    F = np.diag(np.asarray(gamma, dtype=np.float64))
    Q = np.diag(np.asarray(lam, dtype=np.float64))
    H = np.eye(K)
    I = np.eye(K)
    x = np.zeros(K) if init_mean is None else np.asarray(init_mean, dtype=np.float64).copy()
    P = np.eye(K) if init_var is None else np.diag(np.asarray(init_var, dtype=np.float64))
    means = np.empty((T, K))
    variances = np.empty((T, K))
    gains = np.empty((T, K))
    for t in range(T):
        x_prior = F @ x
        P_prior = F @ P @ F.T + Q
        R = np.diag(l[t])
        S = H @ P_prior @ H.T + R
        if abs(np.linalg.det(S)) < 1e-300 or np.linalg.cond(S) > 1e15:
            raise np.linalg.LinAlgError(f"innovation covariance is singular at step {t}")
        Kt = P_prior @ H.T @ np.linalg.inv(S)
        x = Kt @ z[t] + (I - Kt @ H) @ x_prior
        P = (I - Kt @ H) @ P_prior
        means[t] = x
        variances[t] = np.diag(P)
        gains[t] = np.diag(Kt)
    return means, variances, gains
