"""Full forecaster: encoder -> Kalman filter -> decoder, fused with an
autoregressive head and exogenous features into an ``h x D`` forecast.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Mapping

import numpy as np

from .encoder import EPS_NOISE, EncoderParams, encode
from .ndiff import Tensor, relu
from .ssm import EkfParams, KalmanState, LkfParams, run_filter

VARIANTS = ("alkf", "aekf")
CKPT_MAGIC = b"DSSMCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or mismatched checkpoints."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``d`` is fixed at 25 (a 5x5 neighborhood); ``d_c = 25 * channels`` is
    derived. ``use_ar``, ``use_exo`` and ``use_attention`` switch branches off
    for ablations.
    """

    variant: str = "alkf"
    d: int = 25
    d_e: int = 37
    d_a: int = 16
    d_k: int = 8
    horizon: int = 1
    t_in: int = 48
    channels: int = 4
    eps_noise: float = EPS_NOISE
    use_ar: bool = True
    use_exo: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("d", "d_e", "d_a", "d_k", "horizon", "t_in", "channels"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d != 25:
            raise ValueError(f"d must be 25 (5x5 neighborhood), got {self.d}")
        if not self.eps_noise > 0:
            raise ValueError("eps_noise must be positive")

    @property
    def d_c(self) -> int:
        return self.d * self.channels

    @property
    def filter_kind(self) -> str:
        return "lkf" if self.variant == "alkf" else "ekf"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HeadParams:
    """AR head, decoder and fusion weights."""

    w_ar: Tensor   # D x D
    b_ar: Tensor   # D
    w_dec: Tensor  # D_k x D
    b_dec: Tensor  # D
    w1: Tensor     # D x hD (exogenous)
    w2: Tensor     # D x hD (AR)
    w3: Tensor     # D x hD (Kalman)
    b: Tensor      # hD

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.__dict__)


@dataclass
class ModelParams:
    encoder: EncoderParams
    filter: LkfParams | EkfParams
    head: HeadParams

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for prefix, group in (("enc", self.encoder), ("kf", self.filter), ("head", self.head)):
            for name, t in group.tensors().items():
                out[f"{prefix}.{name}"] = t
        return out

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        enc = EncoderParams(**{k: Tensor(v.data.copy(), True) for k, v in self.encoder.tensors().items()})
        kf = type(self.filter)(**{k: Tensor(v.data.copy(), True) for k, v in self.filter.tensors().items()})
        head = HeadParams(**{k: Tensor(v.data.copy(), True) for k, v in self.head.tensors().items()})
        return ModelParams(enc, kf, head)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.named_tensors().values()])

    def load_flat(self, vec: np.ndarray) -> None:
        i = 0
        for t in self.named_tensors().values():
            n = t.data.size
            t.data[...] = vec[i : i + n].reshape(t.shape)
            i += n
        if i != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, parameters need {i}")


def unflatten(template: ModelParams, vec: Tensor) -> ModelParams:
    """Rebuild ``template``'s structure from slices of a flat differentiable vector.

    Gradients of anything computed from the result flow back into ``vec``;
    used to check the full model against finite differences.
    """
    named = template.named_tensors()
    pieces, i = {}, 0
    for name, t in named.items():
        n = t.data.size
        pieces[name] = vec[i : i + n].reshape(t.shape)
        i += n
    if i != vec.shape[0]:
        raise ValueError(f"flat vector has {vec.shape[0]} entries, parameters need {i}")

    def group(prefix):
        return {k.split(".", 1)[1]: v for k, v in pieces.items() if k.startswith(prefix + ".")}

    return ModelParams(
        EncoderParams(**group("enc")), type(template.filter)(**group("kf")), HeadParams(**group("head"))
    )


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


FUSION_BIAS_INIT = 0.5


def init_params(config: ModelConfig, seed: int = 0, fusion_bias: float = FUSION_BIAS_INIT) -> ModelParams:
    """Seeded initialization: uniform ``+-1/sqrt(fan_in)`` weights and zero biases.

    Exceptions: layer-norm gains start at one; the filter starts from an
    identity transition with ``softplus(0)`` process noise; the fusion bias
    starts at ``fusion_bias`` (mid-range of normalized traffic) so that the
    output ReLU begins active for almost every cell -- with a zero bias a
    sizeable fraction of cells start, and stay, at a constant zero forecast.
    """
    rng = np.random.default_rng(seed)
    c = config
    enc = EncoderParams.init(c.d_e, c.d_a, c.d_k, c.channels, c.d, rng)
    kf = LkfParams.init(c.d_k) if c.filter_kind == "lkf" else EkfParams.init(c.d_k)
    hd = c.horizon * c.d
    head = HeadParams(
        w_ar=_uniform(rng, c.d, (c.d, c.d)),
        b_ar=Tensor(np.zeros(c.d), True),
        w_dec=_uniform(rng, c.d_k, (c.d_k, c.d)),
        b_dec=Tensor(np.zeros(c.d), True),
        w1=_uniform(rng, c.d, (c.d, hd)),
        w2=_uniform(rng, c.d, (c.d, hd)),
        w3=_uniform(rng, c.d, (c.d, hd)),
        b=Tensor(np.full(hd, float(fusion_bias)), True),
    )
    return ModelParams(enc, kf, head)


# -- heads -----------------------------------------------------------------
def ar_head(x_last, params: HeadParams) -> Tensor:
    """Linear autoregressive term ``W_ar^T x_T + b_ar``."""
    x_last = x_last if isinstance(x_last, Tensor) else Tensor(x_last)
    return x_last @ params.w_ar + params.b_ar if x_last.ndim > 1 else (x_last.reshape(1, -1) @ params.w_ar + params.b_ar).reshape(-1)


def decode(x_hat, params: HeadParams) -> Tensor:
    """Map the final posterior mean to cell space: ``relu(W_k^T x_T + b_k)``."""
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x_hat.ndim == 1:
        return relu(x_hat.reshape(1, -1) @ params.w_dec + params.b_dec).reshape(-1)
    return relu(x_hat @ params.w_dec + params.b_dec)


def fuse(o_e2, o_ar, o_kal, params: HeadParams, horizon: int) -> Tensor:
    """``relu(W1^T o_e2 + W2^T o_ar + W3^T o_kal + b)`` reshaped to ``h x D``.

    Inputs may be ``D`` vectors or ``B x D`` batches; ``None`` drops a branch.
    """
    terms = [params.b]
    single = False
    for o, w in ((o_e2, params.w1), (o_ar, params.w2), (o_kal, params.w3)):
        if o is None:
            continue
        o = o if isinstance(o, Tensor) else Tensor(o)
        if o.ndim == 1:
            single = True
            o = o.reshape(1, -1)
        terms.append(o @ w)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    out = relu(out)
    d = params.w1.shape[0]
    if out.ndim == 1:
        return out.reshape(horizon, d)
    out = out.reshape(out.shape[0], horizon, d)
    return out.reshape(horizon, d) if single else out


# -- forward -----------------------------------------------------------------
@dataclass
class Forecast:
    """Model output.

    ``values`` is ``h x D`` (or ``B x h x D``) in normalized units; ``gains``
    holds the per-step Kalman gains ``T x D_k`` (or ``B x T x D_k``).
    """

    values: Tensor
    gains: np.ndarray
    floor_events: int = 0

    def denormalized(self, stats) -> np.ndarray:
        from .ingest import denormalize

        return denormalize(self.values.data, stats)


def forward(x, exo, params: ModelParams, config: ModelConfig) -> Forecast:
    """Run one window (``T x D``) or a batch (``B x T x D``) through the model."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))
    exo = exo if isinstance(exo, Tensor) else Tensor(np.asarray(exo, dtype=float))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
        exo = exo.reshape(1, *exo.shape)
    B, T, D = x.shape
    if D != config.d or exo.shape[:2] != (B, T) or exo.shape[2] != config.d_e:
        raise ValueError(
            f"sample shapes traffic {x.shape} / exogenous {exo.shape} do not match config "
            f"(D={config.d}, D_e={config.d_e})"
        )
    enc = encode(x, exo, params.encoder, config.eps_noise, config.use_attention, config.use_exo)
    res = run_filter(enc.z, enc.l, params.filter, KalmanState.initial(config.d_k), variant=config.filter_kind)
    o_kal = decode(res.final.mean, params.head)
    o_ar = ar_head(x[:, T - 1], params.head) if config.use_ar else None
    o_e2 = enc.o_e2[:, T - 1] if config.use_exo else None
    y = fuse(o_e2, o_ar, o_kal, params.head, config.horizon)
    gains = res.gains.data
    if single:
        y = y.reshape(config.horizon, config.d)
        gains = gains[0]
    return Forecast(y, gains, res.floor_events)


def predict(x, exo, params: ModelParams, config: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Batched inference returning a plain ``N x h x D`` array."""
    x = np.asarray(x, dtype=float)
    exo = np.asarray(exo, dtype=float)
    out = [forward(x[i : i + batch_size], exo[i : i + batch_size], params, config).values.data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, config.horizon, config.d))


def gain_trace(x, exo, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Mean Kalman gain per timestep: average over ``D_k``, then over samples."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x, exo = x[None], np.asarray(exo)[None]
    if len(x) < 1:
        raise ValueError("gain_trace needs at least one sample")
    gains = forward(x, exo, params, config).gains
    return gains.mean(axis=2).mean(axis=0)


# -- checkpoints ---------------------------------------------------------------
def save_params(path, params: ModelParams, config: ModelConfig, extra: Mapping | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | float64 LE payload``."""
    named = params.named_tensors()
    header = {
        "format_version": CKPT_VERSION,
        "config": config.to_json(),
        "tensors": [[name, list(t.shape)] for name, t in named.items()],
        "payload_values": int(sum(t.data.size for t in named.values())),
        "extra": dict(extra or {}),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([t.data.ravel() for t in named.values()]).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(hb)) + hb + payload)


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != supported {CKPT_VERSION}")
    return header, 16 + n


def load_params(path, config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Read a checkpoint written by :func:`save_params`.

    If ``config`` is given it must equal the stored one.
    """
    header, offset = read_header(path)
    stored = ModelConfig.from_json(header["config"])
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match requested config {config}")
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = blob[offset:]
    expected = header["payload_values"] * 8
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, expected {expected} (truncated?)")
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    params = init_params(stored, seed=0)
    named = params.named_tensors()
    listed = [(n, tuple(s)) for n, s in header["tensors"]]
    actual = [(n, t.shape) for n, t in named.items()]
    if listed != actual:
        raise CheckpointError(f"{path}: tensor layout {listed} does not match model layout {actual}")
    params.load_flat(values)
    return params, stored
