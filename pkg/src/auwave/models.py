"""AUWave and the RWR-style baseline.

Both map an (N, n_stations) observation batch to an (N, 1, 32, 32) field.

AUWave pipeline::

    obs -> [Linear -> BatchNorm1d -> LeakyReLU(0.2)] * len(mlp_hidden)
        -> Linear(latent_dim) -> Linear(32*32) -> reshape (1, 32, 32)
        -> encoder stages (residual blocks, stride-2 conv between stages)
        -> bottleneck self-attention
        -> decoder stages (2x nearest upsample, concat skip, 1x1 fuse, residual blocks)
        -> 1x1 conv to one channel

With five stages the resolutions run 32, 16, 8, 4, 2, so the attention
layer sees 2x2 = 4 tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError
from .nn import BatchNorm1d, Conv2d, GroupNorm, Linear, Module, ParamFactory
from .tensor import Tensor

GRID = 32
NORM_GROUPS = 32
HEAD_GAIN = 0.02


@dataclass(frozen=True)
class AUWaveConfig:
    n_stations: int
    mlp_hidden: tuple = (896, 832, 800)
    latent_dim: int = 1792
    unet_blocks: int = 5
    layers_per_block: int = 3
    encoder_channels: tuple = (64, 64, 64, 64, 2688)
    use_attention: bool = True
    grid_size: int = GRID

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        self.validate()

    @property
    def decoder_channels(self) -> tuple:
        return tuple(reversed(self.encoder_channels))

    def validate(self) -> None:
        if self.n_stations < 1:
            raise ConfigError("n_stations must be positive")
        if self.grid_size != GRID:
            raise ConfigError(f"grid_size must be {GRID}")
        if not self.mlp_hidden or any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden must be a non-empty list of positive widths")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if not 3 <= self.unet_blocks <= 5:
            raise ConfigError(f"unet_blocks must lie in [3, 5], got {self.unet_blocks}")
        if not 1 <= self.layers_per_block <= 3:
            raise ConfigError(f"layers_per_block must lie in [1, 3], got {self.layers_per_block}")
        if len(self.encoder_channels) != self.unet_blocks:
            raise ConfigError(f"{len(self.encoder_channels)} encoder channel widths for "
                              f"{self.unet_blocks} blocks")
        bad = [c for c in self.encoder_channels if c < 1 or c % NORM_GROUPS]
        if bad:
            raise ConfigError(f"channel widths {bad} are not positive multiples of {NORM_GROUPS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["encoder_channels"] = list(self.encoder_channels)
        return d


@dataclass(frozen=True)
class RWRConfig:
    """Fully connected front end feeding a shallow CNN; no skips, norms or attention."""

    n_stations: int
    fc_hidden: tuple = (512,)
    feature_channels: int = 8
    feature_size: int = 16
    conv_channels: tuple = (32, 32, 16)
    version: int = 1

    def __post_init__(self):
        object.__setattr__(self, "fc_hidden", tuple(int(h) for h in self.fc_hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.n_stations < 1:
            raise ConfigError("n_stations must be positive")
        if self.feature_size * 2 != GRID:
            raise ConfigError("one 2x upsample must reach the 32x32 grid")
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError("RWR uses exactly three conv stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fc_hidden"] = list(self.fc_hidden)
        d["conv_channels"] = list(self.conv_channels)
        return d


def desk_auwave_config(n_stations: int) -> AUWaveConfig:
    """Small AUWave that trains in minutes on one CPU core."""
    return AUWaveConfig(n_stations=n_stations, mlp_hidden=(256, 256), latent_dim=256,
                        unet_blocks=3, layers_per_block=1, encoder_channels=(32, 32, 64),
                        use_attention=True)


def desk_rwr_config(n_stations: int) -> RWRConfig:
    return RWRConfig(n_stations=n_stations)


# ------------------------------------------------------------------ blocks
class ResidualBlock(Module):
    """conv3x3 -> GN -> SiLU -> conv3x3 -> GN -> SiLU, plus identity or 1x1 skip."""

    def __init__(self, f: ParamFactory, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = Conv2d(f, c_in, c_out, 3, bias=False)
        self.norm1 = GroupNorm(f, c_out, NORM_GROUPS)
        self.conv2 = Conv2d(f, c_out, c_out, 3, bias=False)
        self.norm2 = GroupNorm(f, c_out, NORM_GROUPS)
        self.skip = Conv2d(f, c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        h = T.silu(self.norm1(self.conv1(x)))
        h = T.silu(self.norm2(self.conv2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class AttentionBlock(Module):
    """Single-head self-attention over the pixels of a feature map, residual."""

    def __init__(self, f: ParamFactory, channels: int):
        self.channels = channels
        self.query = Linear(f, channels, channels)
        self.key = Linear(f, channels, channels)
        self.value = Linear(f, channels, channels)
        self.out = Linear(f, channels, channels)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        N, C, H, W = x.shape
        L = H * W
        tokens = x.reshape(N, C, L).transpose(0, 2, 1).reshape(N * L, C)
        q = self.query(tokens).reshape(N, L, C)
        k = self.key(tokens).reshape(N, L, C)
        v = self.value(tokens).reshape(N, L, C)
        scores = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(C))
        weights = T.softmax_rows(scores)
        self.last_weights = weights.data
        attended = T.matmul(weights, v).reshape(N * L, C)
        h = self.out(attended).reshape(N, L, C).transpose(0, 2, 1).reshape(N, C, H, W)
        return x + h


class EncoderStage(Module):
    def __init__(self, f: ParamFactory, c_in: int, c_out: int, layers: int, downsample: bool):
        self.blocks = [ResidualBlock(f, c_in if i == 0 else c_out, c_out) for i in range(layers)]
        self.down = Conv2d(f, c_out, c_out, 3, stride=2, padding=1) if downsample else None

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for blk in self.blocks:
            x = blk(x)
        skip = x
        if self.down is not None:
            x = self.down(x)
        return x, skip


class DecoderStage(Module):
    def __init__(self, f: ParamFactory, c_in: int, c_skip: int, c_out: int, layers: int,
                 upsample: bool):
        self.upsample = upsample
        self.fuse = Conv2d(f, c_in + c_skip, c_out, 1)
        self.blocks = [ResidualBlock(f, c_out, c_out) for _ in range(layers)]

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if self.upsample:
            x = T.upsample_nearest_2x(x)
        x = self.fuse(T.concat_channels(x, skip))
        for blk in self.blocks:
            x = blk(x)
        return x


# ------------------------------------------------------------------ models
class AUWave(Module):
    kind = "auwave"

    def __init__(self, cfg: AUWaveConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self._dtype = np.dtype(dtype)
        f = ParamFactory(seed, dtype)
        self.mlp = []
        width = cfg.n_stations
        for h in cfg.mlp_hidden:
            self.mlp.append(Linear(f, width, h))
            self.mlp.append(BatchNorm1d(f, h))
            width = h
        self.latent = Linear(f, width, cfg.latent_dim)
        self.project = Linear(f, cfg.latent_dim, cfg.grid_size ** 2)

        enc = cfg.encoder_channels
        B = cfg.unet_blocks
        self.encoder = []
        c_prev = 1
        for i, c in enumerate(enc):
            self.encoder.append(EncoderStage(f, c_prev, c, cfg.layers_per_block, downsample=i < B - 1))
            c_prev = c
        self.attention = AttentionBlock(f, enc[-1]) if cfg.use_attention else None
        self.decoder = []
        for j, c in enumerate(cfg.decoder_channels):
            skip_c = enc[B - 1 - j]
            self.decoder.append(DecoderStage(f, c_prev, skip_c, c, cfg.layers_per_block,
                                             upsample=j > 0))
            c_prev = c
        # residual stacks grow the activation scale; a damped head keeps the
        # initial prediction near zero in log space
        self.head = Conv2d(f, c_prev, 1, 1, gain=HEAD_GAIN)

    def encode_grid(self, obs: Tensor) -> Tensor:
        """MLP stack and projection, reshaped to the initial (N, 1, 32, 32) field."""
        h = obs
        for lin, bn in zip(self.mlp[::2], self.mlp[1::2]):
            h = T.leaky_relu(bn(lin(h)), 0.2)
        h = self.project(self.latent(h))
        g = self.cfg.grid_size
        return h.reshape(h.shape[0], 1, g, g)

    def forward(self, obs) -> Tensor:
        obs = _check_obs(obs, self.cfg.n_stations, self.dtype)
        x = self.encode_grid(obs)
        skips = []
        for stage in self.encoder:
            x, s = stage(x)
            skips.append(s)
        if self.attention is not None:
            x = self.attention(x)
        for j, stage in enumerate(self.decoder):
            x = stage(x, skips[-1 - j])
        return self.head(x)

    @property
    def dtype(self):
        return self._dtype

    def structure(self) -> dict:
        """Layer widths and resolutions, derived from the built modules."""
        g = self.cfg.grid_size
        mlp_dims = [lin.n_out for lin in self.mlp[::2]]
        res, enc = [], []
        size = g
        for stage in self.encoder:
            enc.append(stage.blocks[-1].c_out)
            res.append(size)
            if stage.down is not None:
                size = (size + 2 * stage.down.padding - 3) // stage.down.stride + 1
        dec, dres = [], []
        for stage in self.decoder:
            if stage.upsample:
                size *= 2
            dec.append(stage.blocks[-1].c_out)
            dres.append(size)
        norms = [m.groups for m in self.modules() if isinstance(m, GroupNorm)]
        return {
            "mlp_dims": mlp_dims,
            "latent_dim": self.latent.n_out,
            "grid_features": self.project.n_out,
            "initial_grid": (1, g, g),
            "encoder_channels": enc,
            "encoder_resolutions": res,
            "blocks_per_stage": [len(s.blocks) for s in self.encoder],
            "decoder_channels": dec,
            "decoder_resolutions": dres,
            "norm_groups": sorted(set(norms)),
            "attention": None if self.attention is None else {
                "channels": self.attention.channels,
                "resolution": res[-1],
                "tokens": res[-1] ** 2,
            },
            "output": (1, dres[-1], dres[-1]),
        }


class RWR(Module):
    kind = "rwr"

    def __init__(self, cfg: RWRConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self._dtype = np.dtype(dtype)
        f = ParamFactory(seed, dtype)
        self.fc = []
        width = cfg.n_stations
        for h in cfg.fc_hidden:
            self.fc.append(Linear(f, width, h))
            width = h
        s, c0 = cfg.feature_size, cfg.feature_channels
        self.to_features = Linear(f, width, c0 * s * s)
        c1, c2, c3 = cfg.conv_channels
        self.conv1 = Conv2d(f, c0, c1, 3)
        self.conv2 = Conv2d(f, c1, c2, 3)
        self.conv3 = Conv2d(f, c2, c3, 3)
        self.head = Conv2d(f, c3, 1, 1)

    @property
    def dtype(self):
        return self._dtype

    def forward(self, obs) -> Tensor:
        obs = _check_obs(obs, self.cfg.n_stations, self.dtype)
        h = obs
        for lin in self.fc:
            h = T.relu(lin(h))
        h = T.relu(self.to_features(h))
        s, c0 = self.cfg.feature_size, self.cfg.feature_channels
        x = h.reshape(h.shape[0], c0, s, s)
        x = T.relu(self.conv1(x))
        x = T.upsample_nearest_2x(x)
        x = T.relu(self.conv2(x))
        x = T.relu(self.conv3(x))
        return self.head(x)


Model = Union[AUWave, RWR]


def _check_obs(obs, n: int, dtype) -> Tensor:
    if not isinstance(obs, Tensor):
        obs = Tensor(np.asarray(obs, dtype=dtype))
    if obs.ndim != 2 or obs.shape[1] != n:
        raise ShapeError(f"expected observations of shape (N, {n}), got {obs.shape}")
    if not np.isfinite(obs.data).all():
        raise InputError("observations contain non-finite values")
    return obs


def build_auwave(cfg: AUWaveConfig, seed: int = 0, dtype=np.float32) -> AUWave:
    return AUWave(cfg, seed, dtype)


def forward_auwave(model: AUWave, obs) -> Tensor:
    return model(obs)


def build_rwr(cfg: RWRConfig, seed: int = 0, dtype=np.float32) -> RWR:
    return RWR(cfg, seed, dtype)


def forward_rwr(model: RWR, obs) -> Tensor:
    return model(obs)


def build_model(kind: str, cfg_dict: dict, seed: int = 0, dtype=np.float32) -> Model:
    """Build either network from a plain-dict config (checkpoint / CLI path)."""
    if kind == "auwave":
        return build_auwave(AUWaveConfig(**cfg_dict), seed, dtype)
    if kind == "rwr":
        return build_rwr(RWRConfig(**cfg_dict), seed, dtype)
    raise ConfigError(f"unknown model kind {kind!r}")
