"""Encoder: exogenous projections, per-timestep spatial CNN, scaled
dot-product self-attention and the observation heads producing the filter
inputs ``z_t`` and ``l_t``.

Every function accepts a single window (``T x ...``) or a batch
(``B x T x ...``) and returns arrays with the same leading layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ndiff import DimensionError, Tensor, concat, conv2d, layer_norm, relu, softmax, transpose

GRID_SIDE = 5
EPS_NOISE = 1e-4


@dataclass
class EncoderParams:
    """Learnable encoder weights.

    Shapes (``C`` conv channels, ``D_c = 25 C``)::

        conv1 C x 1 x 3 x 3     ln1_gain, ln1_bias  D_c
        conv2 C x C x 3 x 3     ln2_gain, ln2_bias  D_c
        w_q, w_k, w_v           D_c x D_a
        w_proj, b_proj          D_c x D_a, D_a   (used when attention is ablated)
        w_e1, b_e1              D_e x D_a, D_a
        w_e2, b_e2              D_e x D, D
        w_k1, b_k1, w_k2, b_k2  2 D_a x D_k, D_k
    """

    conv1: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    conv2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_proj: Tensor
    b_proj: Tensor
    w_e1: Tensor
    b_e1: Tensor
    w_e2: Tensor
    b_e2: Tensor
    w_k1: Tensor
    b_k1: Tensor
    w_k2: Tensor
    b_k2: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.__dict__)

    @property
    def channels(self) -> int:
        return self.conv1.shape[0]

    @property
    def d_a(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_k(self) -> int:
        return self.w_k1.shape[1]

    @classmethod
    def init(cls, d_e: int, d_a: int, d_k: int, channels: int = 4, d: int = 25, rng=None) -> "EncoderParams":
        """Uniform ``+-1/sqrt(fan_in)`` weights, zero biases, unit norm gains."""
        rng = rng if rng is not None else np.random.default_rng(0)
        d_c = d * channels

        def w(*shape, fan_in=None):
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / math.sqrt(fan)
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(
            conv1=w(channels, 1, 3, 3, fan_in=9),
            ln1_gain=Tensor(np.ones(d_c), True),
            ln1_bias=zeros(d_c),
            conv2=w(channels, channels, 3, 3, fan_in=9 * channels),
            ln2_gain=Tensor(np.ones(d_c), True),
            ln2_bias=zeros(d_c),
            w_q=w(d_c, d_a),
            w_k=w(d_c, d_a),
            w_v=w(d_c, d_a),
            w_proj=w(d_c, d_a),
            b_proj=zeros(d_a),
            w_e1=w(d_e, d_a),
            b_e1=zeros(d_a),
            w_e2=w(d_e, d),
            b_e2=zeros(d),
            w_k1=w(2 * d_a, d_k),
            b_k1=zeros(d_k),
            w_k2=w(2 * d_a, d_k),
            b_k2=zeros(d_k),
        )


@dataclass
class EncoderOutput:
    z: Tensor
    l: Tensor
    o_e2: Tensor


def exo_extract(exo, params: EncoderParams) -> tuple[Tensor, Tensor]:
    """Two independent affine maps of the exogenous window (no activation)."""
    exo = exo if isinstance(exo, Tensor) else Tensor(exo)
    if exo.shape[-1] != params.w_e1.shape[0]:
        raise DimensionError(
            f"exogenous window has {exo.shape[-1]} columns but the encoder expects {params.w_e1.shape[0]}"
        )
    return exo @ params.w_e1 + params.b_e1, exo @ params.w_e2 + params.b_e2


def _grid(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    d = x.shape[-1]
    side = int(round(math.sqrt(d)))
    if side * side != d or side != GRID_SIDE:
        raise DimensionError(f"traffic window has {d} cells; expected {GRID_SIDE}x{GRID_SIDE} = 25")
    lead = x.shape[:-1]
    n = int(np.prod(lead))
    return x.reshape(n, 1, side, side), lead


def _conv_block(maps: Tensor, kernel: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    n = maps.shape[0]
    pre = conv2d(maps, kernel, padding=1)
    flat = pre.reshape(n, -1)
    out = relu(layer_norm(flat, gain, bias))
    return out.reshape(pre.shape)


def conv_preactivation(x, params: EncoderParams) -> Tensor:
    """First-layer convolution output before normalization (``N x C x 5 x 5``)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    maps, _ = _grid(x)
    return conv2d(maps, params.conv1, padding=1)


def cnn_encode(x, params: EncoderParams) -> Tensor:
    """Spatial CNN applied independently at every timestep.

    Each ``x_t`` (25 cells) is viewed as a ``1 x 5 x 5`` map and passed
    through two ``conv3x3 -> layer_norm -> relu`` blocks; the result is
    flattened to ``D_c = 25 C``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    maps, lead = _grid(x)
    h = _conv_block(maps, params.conv1, params.ln1_gain, params.ln1_bias)
    h = _conv_block(h, params.conv2, params.ln2_gain, params.ln2_bias)
    return h.reshape(*lead, -1)


def attention_weights(o_cnn: Tensor, params: EncoderParams) -> Tensor:
    """Row-stochastic ``T x T`` matrix ``softmax(Q K^T / sqrt(D_c))``."""
    q = o_cnn @ params.w_q
    k = o_cnn @ params.w_k
    return softmax((q @ transpose(k)) * (1.0 / math.sqrt(o_cnn.shape[-1])))


def self_attention(o_cnn: Tensor, params: EncoderParams) -> Tensor:
    """Scaled dot-product self-attention over the timesteps of one window."""
    return attention_weights(o_cnn, params) @ (o_cnn @ params.w_v)


def attention_bypass(o_cnn: Tensor, params: EncoderParams) -> Tensor:
    """Affine stand-in for attention, keeping the ``D_a`` width."""
    return o_cnn @ params.w_proj + params.b_proj


def observation_head(o_att: Tensor, o_e1: Tensor, params: EncoderParams, eps_noise: float = EPS_NOISE) -> tuple[Tensor, Tensor]:
    """``z = relu(W_k1 [o_att; o_e1] + b_k1)``, ``l = relu(W_k2 [o_att; o_e1] + b_k2) + eps``."""
    if o_att.shape != o_e1.shape:
        raise DimensionError(f"attention output {o_att.shape} and exogenous features {o_e1.shape} differ")
    o = concat([o_att, o_e1], axis=-1)
    z = relu(o @ params.w_k1 + params.b_k1)
    l = relu(o @ params.w_k2 + params.b_k2) + eps_noise
    return z, l


def encode(
    x,
    exo,
    params: EncoderParams,
    eps_noise: float = EPS_NOISE,
    use_attention: bool = True,
    use_exo: bool = True,
) -> EncoderOutput:
    """Full encoder pass producing ``z``, ``l`` and the exogenous decoder features."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    o_e1, o_e2 = exo_extract(exo, params)
    if not use_exo:
        o_e1 = Tensor(np.zeros(o_e1.shape))
        o_e2 = Tensor(np.zeros(o_e2.shape))
    o_cnn = cnn_encode(x, params)
    o_att = self_attention(o_cnn, params) if use_attention else attention_bypass(o_cnn, params)
    z, l = observation_head(o_att, o_e1, params, eps_noise)
    return EncoderOutput(z, l, o_e2)
