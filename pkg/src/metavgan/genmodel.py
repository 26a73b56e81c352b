"""Encoder, shared decoder/generator and discriminator networks.

The decoder used for reconstruction and the generator used for synthesis are
one network with one parameter block (``theta_g``); they differ only in where
the latent code comes from.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .neural import (
    MlpCache,
    MlpSpec,
    OptimizerState,
    ShapeError,
    gaussian_sample,
    init_params,
    mlp_forward,
)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

# latent sizes used for the four standard benchmarks
BENCHMARK_LATENT_DIMS = {"CUB": 512, "SUN": 20, "AWA2": 40, "APY": 20}


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    attr_dim: int
    latent_dim: int
    encoder_hidden: tuple[int, ...] = (1024, 512)
    decoder_hidden: tuple[int, ...] = (1024,)
    disc_hidden: tuple[int, ...] = (1024, 512)
    dropout_rate: float = 0.3
    disc_mode: str = "critic"  # critic | probabilistic
    clip_value: Optional[float] = 0.01  # critic weight clipping; None disables
    de_term_z: str = "posterior"  # posterior | prior

    def __post_init__(self):
        for name in ("encoder_hidden", "decoder_hidden", "disc_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if min(self.feature_dim, self.attr_dim, self.latent_dim) < 1:
            raise ValueError("feature, attribute and latent dims must be positive")
        if self.disc_mode not in ("critic", "probabilistic"):
            raise ValueError(f"disc_mode must be 'critic' or 'probabilistic', got {self.disc_mode!r}")
        if self.de_term_z not in ("posterior", "prior"):
            raise ValueError(f"de_term_z must be 'posterior' or 'prior', got {self.de_term_z!r}")
        if self.clip_value is not None and self.clip_value <= 0:
            raise ValueError("clip_value must be positive or None")

    @property
    def encoder_spec(self) -> MlpSpec:
        return MlpSpec((self.feature_dim + self.attr_dim, *self.encoder_hidden, 2 * self.latent_dim),
                       dropout_rate=self.dropout_rate)

    @property
    def decoder_spec(self) -> MlpSpec:
        return MlpSpec((self.latent_dim + self.attr_dim, *self.decoder_hidden, self.feature_dim),
                       dropout_rate=self.dropout_rate)

    @property
    def disc_spec(self) -> MlpSpec:
        return MlpSpec((self.feature_dim + self.attr_dim, *self.disc_hidden, 1),
                       dropout_rate=self.dropout_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder_hidden", "decoder_hidden", "disc_hidden"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    theta_e: np.ndarray
    theta_g: np.ndarray
    theta_d: np.ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.theta_e.copy(), self.theta_g.copy(), self.theta_d.copy())

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"theta_e": self.theta_e, "theta_g": self.theta_g, "theta_d": self.theta_d}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.as_dict().values())


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Random init in the order encoder, decoder, discriminator."""
    theta_e = init_params(cfg.encoder_spec, rng)
    theta_g = init_params(cfg.decoder_spec, rng)
    theta_d = init_params(cfg.disc_spec, rng)
    return ModelParams(theta_e, theta_g, theta_d)


def clip_weights(theta_d: np.ndarray, c: Optional[float]) -> np.ndarray:
    if c is None:
        return theta_d
    return np.clip(theta_d, -c, c)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


def _check_rows(x: np.ndarray, a: np.ndarray, x_width: int, a_width: int, what: str) -> None:
    if x.ndim != 2 or a.ndim != 2:
        raise ShapeError(f"{what}: inputs must be 2-D batches")
    if x.shape[0] != a.shape[0]:
        raise ShapeError(f"{what}: {x.shape[0]} rows vs {a.shape[0]} attribute rows")
    if x.shape[1] != x_width or a.shape[1] != a_width:
        raise ShapeError(f"{what}: got widths ({x.shape[1]}, {a.shape[1]}), expected ({x_width}, {a_width})")


def encoder_forward(cfg: ModelConfig, params: ModelParams, x: np.ndarray, a: np.ndarray,
                    masks: Optional[Sequence[np.ndarray]] = None):
    """Encoder pass returning ``(posterior, raw_log_var, cache)`` for backprop."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_rows(x, a, cfg.feature_dim, cfg.attr_dim, "encode")
    out, cache = mlp_forward(cfg.encoder_spec, params.theta_e, np.hstack([x, a]), masks)
    mu = out[:, :cfg.latent_dim]
    raw = out[:, cfg.latent_dim:]
    return GaussianPosterior(mu, np.clip(raw, LOGVAR_MIN, LOGVAR_MAX)), raw, cache


def encode(cfg: ModelConfig, params: ModelParams, x: np.ndarray, a: np.ndarray,
           masks: Optional[Sequence[np.ndarray]] = None) -> GaussianPosterior:
    return encoder_forward(cfg, params, x, a, masks)[0]


def reparameterize(rng: np.random.Generator, post: GaussianPosterior,
                   eps: Optional[np.ndarray] = None) -> np.ndarray:
    """``z = mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)`` unless given."""
    log_var = np.clip(post.log_var, LOGVAR_MIN, LOGVAR_MAX)
    if eps is None:
        eps = gaussian_sample(rng, *post.mu.shape)
    return post.mu + np.exp(0.5 * log_var) * eps


def decoder_forward(cfg: ModelConfig, params: ModelParams, z: np.ndarray, a: np.ndarray,
                    masks: Optional[Sequence[np.ndarray]] = None) -> tuple[np.ndarray, MlpCache]:
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_rows(z, a, cfg.latent_dim, cfg.attr_dim, "decode")
    return mlp_forward(cfg.decoder_spec, params.theta_g, np.hstack([z, a]), masks)


def decode(cfg: ModelConfig, params: ModelParams, z: np.ndarray, a: np.ndarray,
           masks: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    return decoder_forward(cfg, params, z, a, masks)[0]


# generation from the prior runs through the same weights as reconstruction
generate = decode


def disc_forward(cfg: ModelConfig, params: ModelParams, x: np.ndarray, a: np.ndarray,
                 masks: Optional[Sequence[np.ndarray]] = None) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_rows(x, a, cfg.feature_dim, cfg.attr_dim, "discriminate")
    out, cache = mlp_forward(cfg.disc_spec, params.theta_d, np.hstack([x, a]), masks)
    return out[:, 0], cache


def discriminate(cfg: ModelConfig, params: ModelParams, x: np.ndarray, a: np.ndarray,
                 masks: Optional[Sequence[np.ndarray]] = None) -> np.ndarray:
    """Unbounded realness score per row (pre-sigmoid in probabilistic mode)."""
    return disc_forward(cfg, params, x, a, masks)[0]


def synthesize(cfg: ModelConfig, params: ModelParams, rng: np.random.Generator,
               a_c: np.ndarray, n: int) -> np.ndarray:
    """Draw ``n`` feature vectors for one class from prior noise (dropout off)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    a_c = np.asarray(a_c, dtype=np.float64).reshape(1, -1)
    z = gaussian_sample(rng, n, cfg.latent_dim)
    return decode(cfg, params, z, np.repeat(a_c, n, axis=0))


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MVGANCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    optimizers: dict[str, OptimizerState] = field(default_factory=dict)
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint.

    Layout (little-endian)::

        8 bytes   magic  b"MVGANCKP"
        uint32    format version
        uint64    header length n
        n bytes   UTF-8 JSON header: config, seed, step, extra, optimizer
                  scalars and an ordered list of [name, length] array entries
        ...       the listed arrays as raw float64, in header order
    """
    arrays: list[tuple[str, np.ndarray]] = [(k, v) for k, v in ckpt.params.as_dict().items()]
    opt_meta = {}
    for name, st in ckpt.optimizers.items():
        opt_meta[name] = {"kind": st.kind, "learning_rate": st.learning_rate, "beta1": st.beta1,
                          "beta2": st.beta2, "epsilon": st.epsilon, "step_count": st.step_count}
        if st.m is not None:
            arrays.append((f"opt/{name}/m", st.m))
            arrays.append((f"opt/{name}/v", st.v))
    header = {
        "config": ckpt.config.to_dict(),
        "seed": int(ckpt.seed),
        "step": int(ckpt.step),
        "extra": ckpt.extra,
        "optimizers": opt_meta,
        "arrays": [[name, int(arr.size)] for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for _, arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, n = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 8 + struct.calcsize("<IQ")
    header = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    arrays = {}
    for name, size in header["arrays"]:
        arrays[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    cfg = ModelConfig.from_dict(header["config"])
    params = ModelParams(arrays["theta_e"], arrays["theta_g"], arrays["theta_d"])
    if (params.theta_e.size != cfg.encoder_spec.n_params() or params.theta_g.size != cfg.decoder_spec.n_params()
            or params.theta_d.size != cfg.disc_spec.n_params()):
        raise CheckpointError(f"{path}: parameter sizes do not match the stored config")
    optimizers = {}
    for name, meta in header["optimizers"].items():
        optimizers[name] = OptimizerState(meta["kind"], meta["learning_rate"], meta["beta1"], meta["beta2"],
                                          meta["epsilon"], meta["step_count"],
                                          arrays.get(f"opt/{name}/m"), arrays.get(f"opt/{name}/v"))
    return Checkpoint(cfg, params, optimizers, header["seed"], header["step"], header["extra"])
