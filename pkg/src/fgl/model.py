"""DiT-lite velocity network and the FGL1 checkpoint container.

The network sees, per frame, the channel concatenation
``[z_t ; melody·W_mel ; token_embedding ; z_ctx]`` projected to ``d_hidden``,
plus fixed sinusoidal frame positions and a learned projection of a
sinusoidal timestep embedding. A stack of pre-norm transformer blocks follows,
then a linear read-out to ``d_latent`` channels.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import diffcore as dc
from .conditioning import BatchCondition, ConditionBundle, as_batch
from .diffcore import Tensor

MAGIC = b"FGL1"
PARAMS_VERSION = "fgl-params-2"
DEFAULT_CFG_SCALE = 3.0


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_hidden: int = 128
    d_latent: int = 8
    d_melody: int = 16
    d_token_emb: int = 16
    n_tokens: int = 32
    max_frames: int = 256
    d_time: int = 32
    mlp_ratio: int = 4
    cfg_scale: float = DEFAULT_CFG_SCALE

    def __post_init__(self):
        for f in ("n_layers", "n_heads", "d_hidden", "d_latent", "d_melody",
                  "d_token_emb", "n_tokens", "max_frames", "d_time", "mlp_ratio"):
            if getattr(self, f) <= 0:
                raise ValueError(f"ModelConfig.{f} must be positive")
        if self.d_hidden % self.n_heads:
            raise ValueError("d_hidden must be divisible by n_heads")
        if self.d_time % 2:
            raise ValueError("d_time must be even")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    version: str = PARAMS_VERSION

    def leaves(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng([seed, 0x46474C])
    H, L = config.d_hidden, config.n_layers
    d_in = 2 * config.d_latent + config.d_melody + config.d_token_emb

    def w(fan_in, fan_out, gain=1.0):
        return rng.standard_normal((fan_in, fan_out)) * (gain / np.sqrt(fan_in))

    t: dict[str, np.ndarray] = {
        "tok_emb": rng.standard_normal((config.n_tokens + 1, config.d_token_emb)),
        "mel_proj": w(config.d_melody, config.d_melody),
        "in_proj.w": w(d_in, H),
        "in_proj.b": np.zeros(H),
        "time.w1": w(config.d_time, H),
        "time.b1": np.zeros(H),
        "time.w2": w(H, H),
        "time.b2": np.zeros(H),
    }
    res_gain = 1.0 / np.sqrt(2 * L)
    for i in range(L):
        p = f"blocks.{i}."
        t[p + "ln1.g"] = np.ones(H)
        t[p + "ln1.b"] = np.zeros(H)
        t[p + "qkv.w"] = w(H, 3 * H)
        t[p + "q.b"] = np.zeros(H)
        t[p + "v.b"] = np.zeros(H)
        t[p + "attn_out.w"] = w(H, H, res_gain)
        t[p + "attn_out.b"] = np.zeros(H)
        t[p + "ln2.g"] = np.ones(H)
        t[p + "ln2.b"] = np.zeros(H)
        t[p + "mlp.w1"] = w(H, config.mlp_ratio * H)
        t[p + "mlp.b1"] = np.zeros(config.mlp_ratio * H)
        t[p + "mlp.w2"] = w(config.mlp_ratio * H, H, res_gain)
        t[p + "mlp.b2"] = np.zeros(H)
    t["ln_out.g"] = np.ones(H)
    t["ln_out.b"] = np.zeros(H)
    t["out.w"] = w(H, config.d_latent)
    t["out.b"] = np.zeros(config.d_latent)
    return ModelParams(config, t)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def frame_positions(n_frames: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(256.0) * np.arange(half) / half)
    ang = np.arange(n_frames)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)[:, :dim]


def _as_tensors(params) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return {k: Tensor(v) for k, v in params.tensors.items()}
    return params


def _config_of(params, config: ModelConfig | None) -> ModelConfig:
    if isinstance(params, ModelParams):
        return params.config
    if config is None:
        raise ValueError("config required when params are raw tensors")
    return config


def _block(p: Mapping[str, Tensor], i: int, x: Tensor, n_heads: int) -> Tensor:
    pre = f"blocks.{i}."
    B, T, H = x.shape
    dh = H // n_heads
    hn = dc.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    qkv = hn @ p[pre + "qkv.w"]
    # no key bias: it shifts every score in a row equally and has zero gradient
    q = dc.split_heads(dc.add_bias(dc.slice_(qkv, -1, 0, H), p[pre + "q.b"]), n_heads)
    k = dc.split_heads(dc.slice_(qkv, -1, H, 2 * H), n_heads)
    v = dc.split_heads(dc.add_bias(dc.slice_(qkv, -1, 2 * H, 3 * H), p[pre + "v.b"]), n_heads)
    att = dc.softmax(dc.scale(q @ dc.transpose(k), 1.0 / np.sqrt(dh)))
    o = dc.merge_heads(att @ v, n_heads)
    x = x + dc.add_bias(o @ p[pre + "attn_out.w"], p[pre + "attn_out.b"])
    hn = dc.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    hmid = dc.gelu(dc.add_bias(hn @ p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
    return x + dc.add_bias(hmid @ p[pre + "mlp.w2"], p[pre + "mlp.b2"])


def _check_t(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return t


def velocity(params, z_t, t, cond, *, keep_cond: np.ndarray | None = None,
             config: ModelConfig | None = None) -> Tensor:
    """Velocity prediction v(z_t, t, c).

    ``z_t`` is (T, D) with a single :class:`ConditionBundle`, or (B, T, D) with a
    :class:`BatchCondition`. ``t`` is a scalar or a (B,) array. ``keep_cond``
    (B,) of 0/1 zeroes the melody and token channels per sequence.
    """
    cfg = _config_of(params, config)
    p = _as_tensors(params)
    single = isinstance(cond, ConditionBundle)
    c = as_batch(cond)
    z = dc.const(z_t)
    if single:
        z = dc.reshape(z, (1,) + z.shape)
    B, T, D = z.shape
    if c.n_frames != T or c.batch_size != B:
        raise dc.ShapeError(f"z_t frames/batch {(B, T)} vs condition {(c.batch_size, c.n_frames)}")
    if D != cfg.d_latent:
        raise dc.ShapeError(f"latent width {D} != config {cfg.d_latent}")
    if T > cfg.max_frames:
        raise dc.ShapeError(f"{T} frames exceeds max_frames {cfg.max_frames}")
    tt = _check_t(t)
    if tt.size == 1 and B > 1:
        tt = np.full(B, tt[0])

    mel = c.melody
    emb = dc.embedding(p["tok_emb"], c.token_grid)
    if keep_cond is not None:
        k = np.asarray(keep_cond, dtype=np.float64)[:, None, None]
        mel = mel * k
        emb = dc.mul(emb, np.broadcast_to(k, emb.shape))
    h = dc.const(mel) @ p["mel_proj"]
    x = dc.concat([z, h, emb, dc.const(c.z_ctx)], axis=-1)
    x = dc.add_bias(x @ p["in_proj.w"], p["in_proj.b"])
    pos = np.broadcast_to(frame_positions(T, cfg.d_hidden)[None], x.shape)
    x = x + dc.const(np.ascontiguousarray(pos))
    temb = dc.const(timestep_features(tt, cfg.d_time))
    temb = dc.gelu(dc.add_bias(temb @ p["time.w1"], p["time.b1"]))
    temb = dc.add_bias(temb @ p["time.w2"], p["time.b2"])
    x = x + dc.expand_frames(temb, T)
    for i in range(cfg.n_layers):
        x = _block(p, i, x, cfg.n_heads)
    x = dc.layernorm(x, p["ln_out.g"], p["ln_out.b"])
    out = dc.add_bias(x @ p["out.w"], p["out.b"])
    if single:
        out = dc.reshape(out, (T, D))
    return out


def velocity_cfg(params, z_t, t, cond, cfg_scale: float | None = None, *,
                 config: ModelConfig | None = None) -> Tensor:
    """Classifier-free guidance: v_u + s (v_c - v_u); the unconditional branch
    drops melody and tokens but keeps the context latent."""
    cfg = _config_of(params, config)
    s = cfg.cfg_scale if cfg_scale is None else float(cfg_scale)
    B = 1 if isinstance(cond, ConditionBundle) else as_batch(cond).batch_size
    if s == 1.0:
        return velocity(params, z_t, t, cond, config=cfg)
    v_u = velocity(params, z_t, t, cond, keep_cond=np.zeros(B), config=cfg)
    if s == 0.0:
        return v_u
    v_c = velocity(params, z_t, t, cond, config=cfg)
    return v_u + dc.scale(v_c - v_u, s)


class VelocityField:
    """Callable wrapper ``field(z, t, cond, cfg_scale=None) -> Tensor`` over model params.

    ``params`` may be :class:`ModelParams` (constants) or a dict of leaf tensors
    for differentiation.
    """

    def __init__(self, params, config: ModelConfig | None = None, melody_enabled: bool = True):
        self.params = params
        self.config = _config_of(params, config)
        self.melody_enabled = melody_enabled

    def _cond(self, cond):
        c = as_batch(cond)
        return c if self.melody_enabled else c.without_melody()

    def __call__(self, z, t, cond, cfg_scale: float | None = None,
                 keep_cond: np.ndarray | None = None) -> Tensor:
        c = self._cond(cond)
        if cfg_scale is None or cfg_scale == 1.0:
            return velocity(self.params, z, t, c, keep_cond=keep_cond, config=self.config)
        return velocity_cfg(self.params, z, t, c, cfg_scale, config=self.config)


# --- checkpoints -------------------------------------------------------------

def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(params: ModelParams, meta: Mapping | None = None,
              extra: Mapping[str, np.ndarray] | None = None) -> bytes:
    """FGL1 layout (little-endian):

    ``b"FGL1" | u32 header_len | header JSON | u32 n_records |`` then per record
    ``u32 name_len | name utf-8 | u32 ndim | u32 dims... | f64 data``.
    Records are written in sorted name order. ``extra`` tensors (e.g. optimizer
    moments) are stored under an ``extra/`` prefix.
    """
    header = {"version": params.version, "config": params.config.to_dict(), "meta": dict(meta or {})}
    records = dict(params.tensors)
    for k, v in (extra or {}).items():
        records["extra/" + k] = v
    buf = io.BytesIO()
    buf.write(MAGIC)
    hb = _json_bytes(header)
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(records)))
    for name in sorted(records):
        arr = np.ascontiguousarray(records[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def deserialize(data: bytes) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not an FGL1 checkpoint")
    off = 4

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint")
        chunk = data[off:off + n]
        off += n
        return chunk

    (hl,) = struct.unpack("<I", take(4))
    header = json.loads(take(hl).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack("<I", take(4))
        name = take(nl).decode("utf-8")
        (nd,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{nd}I", take(4 * nd))
        count = int(np.prod(shape)) if nd else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name.startswith("extra/"):
            extra[name[len("extra/"):]] = arr
        else:
            tensors[name] = arr
    if off != len(data):
        raise CheckpointError("trailing bytes after last record")
    params = ModelParams(ModelConfig.from_dict(header["config"]), tensors, header["version"])
    return params, header.get("meta", {}), extra


def save_checkpoint(path, params: ModelParams, meta: Mapping | None = None,
                    extra: Mapping[str, np.ndarray] | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(serialize(params, meta, extra))


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    return deserialize(Path(path).read_bytes())
