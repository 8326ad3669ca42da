"""Tiny conditional U-Net predicting the clean latent, with fusion hook points."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from stage_world import htft
from stage_world import numerics as nx
from stage_world.geometry import WeightMap
from stage_world.scheduler import SIGMA_DATA, add_noise, preconditioning

RASTER_CHANNELS = 3
EMBED_SCALE = 100.0


class TrainingError(RuntimeError):
    """Raised when a training step cannot produce a finite loss."""


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 1
    latent_height: int = 32
    latent_width: int = 32
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    token_dim: int = 64
    embed_dim: int = 64
    groups: int = 8
    anchor_patch: int = 4
    fusion_sites: Tuple[str, ...] = ("mid", "up1", "up0")
    dropout: float = htft.DEFAULT_DROPOUT
    sigma_data: float = SIGMA_DATA

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "fusion_sites", tuple(self.fusion_sites))
        if self.levels < 1:
            raise ValueError("channel_mults needs at least one level")
        factor = 2 ** (self.levels - 1)
        if self.latent_height % factor or self.latent_width % factor:
            raise ValueError(
                f"latent {self.latent_height}x{self.latent_width} not divisible by 2^(levels-1)={factor}"
            )
        if self.latent_height % self.anchor_patch or self.latent_width % self.anchor_patch:
            raise ValueError(f"latent size not divisible by anchor patch {self.anchor_patch}")
        for level in range(self.levels):
            if self.level_channels(level) % self.groups:
                raise ValueError(f"level {level} channels not divisible by {self.groups} groups")
        unknown = set(self.fusion_sites) - set(self.available_sites())
        if unknown:
            raise ValueError(f"unknown fusion sites {sorted(unknown)}; available {self.available_sites()}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def input_channels(self) -> int:
        return 2 * self.latent_channels + RASTER_CHANNELS

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return (self.latent_channels, self.latent_height, self.latent_width)

    @property
    def anchor_token_width(self) -> int:
        return self.latent_channels * self.anchor_patch * self.anchor_patch

    def level_channels(self, level: int) -> int:
        return self.base_channels * self.channel_mults[level]

    def available_sites(self) -> Tuple[str, ...]:
        return ("mid",) + tuple(f"up{level}" for level in reversed(range(self.levels - 1)))

    def site_channels(self, site: str) -> int:
        if site == "mid":
            return self.level_channels(self.levels - 1)
        return self.level_channels(int(site[2:]))

    def to_dict(self) -> Dict[str, object]:
        payload = asdict(self)
        payload["channel_mults"] = list(self.channel_mults)
        payload["fusion_sites"] = list(self.fusion_sites)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, object]) -> "UNetConfig":
        return cls(**dict(payload))


@dataclass(frozen=True, eq=False)
class ConditionPack:
    """Per-frame conditioning: previous-frame latent, anchor tokens, raster, loss weights."""

    cond_latent: np.ndarray
    anchor_tokens: np.ndarray
    raster: np.ndarray
    weight_map: WeightMap


@dataclass(frozen=True, eq=False)
class NetworkInputs:
    cond_channels: np.ndarray
    anchor_tokens: np.ndarray


def anchor_tokens_from_latent(latent: np.ndarray, patch: int) -> np.ndarray:
    """Flatten non-overlapping patch x patch blocks of the anchor latent into token rows."""
    channels, height, width = latent.shape
    blocks = latent.reshape(channels, height // patch, patch, width // patch, patch)
    tokens = blocks.transpose(1, 3, 0, 2, 4).reshape((height // patch) * (width // patch), channels * patch * patch)
    return np.ascontiguousarray(tokens, dtype=np.float32)


def encode_conditions(cond: ConditionPack, config: UNetConfig) -> NetworkInputs:
    """Condition latent and raster are stacked as input channels; anchor tokens feed cross-attention."""
    latent_shape = config.latent_shape
    if tuple(cond.cond_latent.shape) != latent_shape:
        raise nx.ShapeError(f"cond_latent shape {cond.cond_latent.shape}, expected {latent_shape}")
    raster_shape = (RASTER_CHANNELS, config.latent_height, config.latent_width)
    if tuple(cond.raster.shape) != raster_shape:
        raise nx.ShapeError(f"raster shape {cond.raster.shape}, expected {raster_shape}")
    if cond.weight_map.shape != (config.latent_height, config.latent_width):
        raise nx.ShapeError(f"weight map shape {cond.weight_map.shape} does not match the latent grid")
    if cond.anchor_tokens.ndim != 2 or cond.anchor_tokens.shape[1] != config.anchor_token_width:
        raise nx.ShapeError(
            f"anchor tokens shape {cond.anchor_tokens.shape}, expected (n, {config.anchor_token_width})"
        )
    stacked = np.concatenate([cond.cond_latent, cond.raster], axis=0).astype(np.float32)
    return NetworkInputs(cond_channels=stacked, anchor_tokens=cond.anchor_tokens.astype(np.float32))


def sigma_features(c_noise: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = c_noise * EMBED_SCALE * freqs
    return np.concatenate([np.sin(args), np.cos(args)])[None, :]


def weighted_loss(x0_hat: nx.Tensor, x0: np.ndarray, weights: WeightMap) -> nx.Tensor:
    """mean(W_aux * (x0 - x0_hat)^2) with W_aux broadcast over latent channels."""
    return nx.weighted_mse(x0_hat, x0, weights.values)


class Denoiser:
    """Holds the parameters and runs the preconditioned U-Net."""

    def __init__(
        self,
        config: UNetConfig,
        params: nx.ParamStore,
        selection: htft.SelectionSet = htft.SelectionSet(),
    ) -> None:
        self.config = config
        self.params = params
        self.selection = selection
        self.fusion_blocks = {
            site: htft.FusionBlock(site, config.site_channels(site), config.groups, config.dropout)
            for site in config.fusion_sites
        }
        missing = [name for name in self.expected_parameter_names() if name not in params]
        if missing:
            raise nx.CheckpointError(f"parameters missing for this config: {missing[:5]}")

    @classmethod
    def initialize(cls, config: UNetConfig, seed: int, selection: htft.SelectionSet = htft.SelectionSet()) -> "Denoiser":
        rng = nx.make_rng(seed, "denoiser-init")
        store = nx.ParamStore()
        _init_backbone(store, config, rng)
        for site in config.fusion_sites:
            htft.FusionBlock(site, config.site_channels(site), config.groups, config.dropout).init_params(store, rng)
        return cls(config, store, selection)

    def expected_parameter_names(self) -> List[str]:
        names = _backbone_names(self.config)
        for block in self.fusion_blocks.values():
            names.extend(block.parameter_names())
        return names

    def fusion_parameter_names(self) -> List[str]:
        return [name for name in self.params.names() if name.startswith("htft.")]

    def backbone_parameter_names(self) -> List[str]:
        return [name for name in self.params.names() if not name.startswith("htft.")]

    # forward pass

    def forward(
        self,
        x_t: np.ndarray,
        sigma: float,
        cond: ConditionPack,
        buffers: Optional[Mapping[str, htft.StreamingBuffer2D]] = None,
        step_index: int = 0,
        time_index: int = 0,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[nx.Tensor, Dict[str, htft.FeatureFrame]]:
        """Estimate x0; with buffers, each fusion site reads its step buffer and emits its pre-fusion features."""
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        x = np.asarray(x_t, dtype=np.float32)
        if tuple(x.shape) != self.config.latent_shape:
            raise nx.ShapeError(f"x_t shape {x.shape}, expected {self.config.latent_shape}")
        inputs = encode_conditions(cond, self.config)
        c_skip, c_out, c_in, c_noise = preconditioning(sigma, self.config.sigma_data)

        emitted: Dict[str, htft.FeatureFrame] = {}
        context = _PassContext(
            buffers=buffers,
            step_index=step_index,
            time_index=time_index,
            train_mode=train_mode,
            rng=rng,
            emitted=emitted,
        )
        if buffers is not None:
            for site in self.config.fusion_sites:
                if site not in buffers:
                    raise htft.StreamingBufferError(f"no buffer for fusion site {site}")
                buffers[site].step(step_index)

        p = self.params
        features = nx.Tensor(sigma_features(c_noise, self.config.embed_dim))
        emb = nx.linear(features, p["embed.0.weight"], p["embed.0.bias"])
        emb = nx.linear(nx.silu(emb), p["embed.1.weight"], p["embed.1.bias"])
        emb_act = nx.silu(emb)
        anchor = nx.silu(nx.linear(nx.Tensor(inputs.anchor_tokens), p["anchor.weight"], p["anchor.bias"]))

        net_in = nx.Tensor(np.concatenate([c_in * x, inputs.cond_channels], axis=0))
        h = nx.add_channel(nx.conv2d(net_in, p["input.weight"]), p["input.bias"])
        skips: List[nx.Tensor] = []
        for level in range(self.config.levels):
            if level > 0:
                h = nx.avg_pool(h, 2)
                h = nx.add_channel(nx.conv2d(h, p[f"down{level}.proj.weight"]), p[f"down{level}.proj.bias"])
            h = self._res_block(f"down{level}.res", h, emb_act)
            h = self._anchor_attention(f"down{level}.anchor", h, anchor)
            skips.append(h)

        h = self._res_block("mid.res", h, emb_act)
        h = self._anchor_attention("mid.anchor", h, anchor)
        h = self._fusion_site("mid", h, context)

        for level in reversed(range(self.config.levels - 1)):
            h = nx.upsample_nearest(h, 2)
            h = nx.concat([h, skips[level]], axis=0)
            h = nx.add_channel(nx.conv2d(h, p[f"up{level}.proj.weight"]), p[f"up{level}.proj.bias"])
            h = self._res_block(f"up{level}.res", h, emb_act)
            h = self._anchor_attention(f"up{level}.anchor", h, anchor)
            h = self._fusion_site(f"up{level}", h, context)

        h = nx.silu(nx.group_norm(h, self.config.groups, weight=p["out.norm.weight"], bias=p["out.norm.bias"]))
        raw = nx.add_channel(nx.conv2d(h, p["out.conv.weight"]), p["out.conv.bias"])
        x0_hat = nx.add(nx.Tensor(c_skip * x), nx.scale(raw, c_out))
        return x0_hat, emitted

    def __call__(
        self,
        x_t: np.ndarray,
        sigma: float,
        cond: ConditionPack,
        buffers: Optional[Mapping[str, htft.StreamingBuffer2D]],
        step_index: int,
        time_index: int,
    ) -> Tuple[np.ndarray, Dict[str, htft.FeatureFrame]]:
        """Inference entry point used by the streaming sampler."""
        x0_hat, emitted = self.forward(x_t, sigma, cond, buffers, step_index, time_index, train_mode=False)
        return x0_hat.data, emitted

    def _res_block(self, prefix: str, h: nx.Tensor, emb_act: nx.Tensor) -> nx.Tensor:
        p = self.params
        groups = self.config.groups
        out = nx.silu(nx.group_norm(h, groups, weight=p[f"{prefix}.norm1.weight"], bias=p[f"{prefix}.norm1.bias"]))
        out = nx.add_channel(nx.conv2d(out, p[f"{prefix}.conv1.weight"]), p[f"{prefix}.conv1.bias"])
        shift = nx.linear(emb_act, p[f"{prefix}.emb.weight"], p[f"{prefix}.emb.bias"])
        out = nx.add_channel(out, nx.reshape(shift, (h.shape[0],)))
        out = nx.silu(nx.group_norm(out, groups, weight=p[f"{prefix}.norm2.weight"], bias=p[f"{prefix}.norm2.bias"]))
        out = nx.add_channel(nx.conv2d(out, p[f"{prefix}.conv2.weight"]), p[f"{prefix}.conv2.bias"])
        return nx.add(h, out)

    def _anchor_attention(self, prefix: str, h: nx.Tensor, anchor: nx.Tensor) -> nx.Tensor:
        p = self.params
        channels, height, width = h.shape
        normed = nx.group_norm(h, self.config.groups, weight=p[f"{prefix}.norm.weight"], bias=p[f"{prefix}.norm.bias"])
        keys = nx.linear(anchor, p[f"{prefix}.kv.weight"], p[f"{prefix}.kv.bias"])
        attended = nx.cross_attention(
            htft.to_tokens(normed), keys, p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"]
        )
        update = nx.linear(attended, p[f"{prefix}.out.weight"], p[f"{prefix}.out.bias"])
        return nx.add(h, htft.from_tokens(update, height, width))

    def _fusion_site(self, site: str, h: nx.Tensor, context: "_PassContext") -> nx.Tensor:
        if context.buffers is None or site not in self.fusion_blocks:
            return h
        channels, height, width = h.shape
        context.emitted[site] = htft.FeatureFrame(
            time_index=context.time_index,
            step_index=context.step_index,
            tokens=np.ascontiguousarray(h.data.reshape(channels, height * width).T, dtype=np.float32),
        )
        selected = htft.select(context.buffers[site].step(context.step_index), self.selection)
        if selected.shape[0] == 0:
            return h
        fused = self.fusion_blocks[site](self.params, htft.to_tokens(h), selected, context.train_mode, context.rng)
        return htft.from_tokens(fused, height, width)


@dataclass
class _PassContext:
    buffers: Optional[Mapping[str, htft.StreamingBuffer2D]]
    step_index: int
    time_index: int
    train_mode: bool
    rng: Optional[np.random.Generator]
    emitted: Dict[str, htft.FeatureFrame] = field(default_factory=dict)


# parameter layout


def _res_names(prefix: str) -> List[str]:
    return [
        f"{prefix}.{part}"
        for part in (
            "norm1.weight", "norm1.bias", "conv1.weight", "conv1.bias", "emb.weight", "emb.bias",
            "norm2.weight", "norm2.bias", "conv2.weight", "conv2.bias",
        )
    ]


def _anchor_names(prefix: str) -> List[str]:
    return [
        f"{prefix}.{part}"
        for part in ("norm.weight", "norm.bias", "kv.weight", "kv.bias", "wq", "wk", "wv", "out.weight", "out.bias")
    ]


def _backbone_names(config: UNetConfig) -> List[str]:
    names = ["embed.0.weight", "embed.0.bias", "embed.1.weight", "embed.1.bias", "anchor.weight", "anchor.bias"]
    names += ["input.weight", "input.bias"]
    for level in range(config.levels):
        if level > 0:
            names += [f"down{level}.proj.weight", f"down{level}.proj.bias"]
        names += _res_names(f"down{level}.res") + _anchor_names(f"down{level}.anchor")
    names += _res_names("mid.res") + _anchor_names("mid.anchor")
    for level in reversed(range(config.levels - 1)):
        names += [f"up{level}.proj.weight", f"up{level}.proj.bias"]
        names += _res_names(f"up{level}.res") + _anchor_names(f"up{level}.anchor")
    names += ["out.norm.weight", "out.norm.bias", "out.conv.weight", "out.conv.bias"]
    return names


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain * math.sqrt(2.0 / (c_in * 9)), (c_out, c_in, 3, 3))


def _dense_init(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    return rng.normal(0.0, gain / math.sqrt(n_in), (n_in, n_out))


def _init_res(store: nx.ParamStore, prefix: str, channels: int, embed_dim: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.norm1.weight", np.ones(channels))
    store.add(f"{prefix}.norm1.bias", np.zeros(channels))
    store.add(f"{prefix}.conv1.weight", _conv_init(rng, channels, channels))
    store.add(f"{prefix}.conv1.bias", np.zeros(channels))
    store.add(f"{prefix}.emb.weight", _dense_init(rng, embed_dim, channels))
    store.add(f"{prefix}.emb.bias", np.zeros(channels))
    store.add(f"{prefix}.norm2.weight", np.ones(channels))
    store.add(f"{prefix}.norm2.bias", np.zeros(channels))
    store.add(f"{prefix}.conv2.weight", _conv_init(rng, channels, channels, gain=0.2))
    store.add(f"{prefix}.conv2.bias", np.zeros(channels))


def _init_anchor(store: nx.ParamStore, prefix: str, channels: int, token_dim: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.norm.weight", np.ones(channels))
    store.add(f"{prefix}.norm.bias", np.zeros(channels))
    store.add(f"{prefix}.kv.weight", _dense_init(rng, token_dim, channels))
    store.add(f"{prefix}.kv.bias", np.zeros(channels))
    store.add(f"{prefix}.wq", _dense_init(rng, channels, channels))
    store.add(f"{prefix}.wk", _dense_init(rng, channels, channels))
    store.add(f"{prefix}.wv", _dense_init(rng, channels, channels))
    store.add(f"{prefix}.out.weight", _dense_init(rng, channels, channels, gain=0.1))
    store.add(f"{prefix}.out.bias", np.zeros(channels))


def _init_backbone(store: nx.ParamStore, config: UNetConfig, rng: np.random.Generator) -> None:
    embed_dim = config.embed_dim
    store.add("embed.0.weight", _dense_init(rng, embed_dim, embed_dim))
    store.add("embed.0.bias", np.zeros(embed_dim))
    store.add("embed.1.weight", _dense_init(rng, embed_dim, embed_dim))
    store.add("embed.1.bias", np.zeros(embed_dim))
    store.add("anchor.weight", _dense_init(rng, config.anchor_token_width, config.token_dim))
    store.add("anchor.bias", np.zeros(config.token_dim))

    first = config.level_channels(0)
    store.add("input.weight", _conv_init(rng, first, config.input_channels))
    store.add("input.bias", np.zeros(first))
    for level in range(config.levels):
        channels = config.level_channels(level)
        if level > 0:
            previous = config.level_channels(level - 1)
            store.add(f"down{level}.proj.weight", _conv_init(rng, channels, previous))
            store.add(f"down{level}.proj.bias", np.zeros(channels))
        _init_res(store, f"down{level}.res", channels, embed_dim, rng)
        _init_anchor(store, f"down{level}.anchor", channels, config.token_dim, rng)
    deepest = config.level_channels(config.levels - 1)
    _init_res(store, "mid.res", deepest, embed_dim, rng)
    _init_anchor(store, "mid.anchor", deepest, config.token_dim, rng)
    incoming = deepest
    for level in reversed(range(config.levels - 1)):
        channels = config.level_channels(level)
        store.add(f"up{level}.proj.weight", _conv_init(rng, channels, incoming + channels))
        store.add(f"up{level}.proj.bias", np.zeros(channels))
        _init_res(store, f"up{level}.res", channels, embed_dim, rng)
        _init_anchor(store, f"up{level}.anchor", channels, config.token_dim, rng)
        incoming = channels
    store.add("out.norm.weight", np.ones(first))
    store.add("out.norm.bias", np.zeros(first))
    store.add("out.conv.weight", _conv_init(rng, config.latent_channels, first, gain=0.1))
    store.add("out.conv.bias", np.zeros(config.latent_channels))


# training


@dataclass(eq=False)
class TrainBatch:
    x0: np.ndarray
    sigma: float
    eps: np.ndarray
    cond: ConditionPack
    step_index: int = 0
    time_index: int = 0


@dataclass(eq=False)
class StepResult:
    loss: float
    emitted: Dict[str, htft.FeatureFrame]
    updated: bool = True


def train_step(
    denoiser: Denoiser,
    batch: TrainBatch,
    optimizer: nx.AdamState,
    lr: float,
    trainable: Sequence[str],
    buffers: Optional[Mapping[str, htft.StreamingBuffer2D]] = None,
    rng: Optional[np.random.Generator] = None,
) -> StepResult:
    """One forward, backward and Adam update over the ``trainable`` parameters."""
    x_t = add_noise(batch.x0, batch.sigma, batch.eps)
    tape = nx.Tape()
    tape.watch(denoiser.params, trainable)
    try:
        with tape:
            x0_hat, emitted = denoiser.forward(
                x_t,
                batch.sigma,
                batch.cond,
                buffers=buffers,
                step_index=batch.step_index,
                time_index=batch.time_index,
                train_mode=True,
                rng=rng,
            )
            loss = weighted_loss(x0_hat, batch.x0, batch.cond.weight_map)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value}")
        # no trainable parameter reached the loss (e.g. fusion-only training on an empty buffer)
        if not tape.recorded(loss):
            return StepResult(loss=value, emitted=emitted, updated=False)
        grads = nx.backward(tape, loss)
    except nx.NumericsError as exc:
        raise TrainingError(f"training step failed: {exc}") from exc
    nx.adam_step(denoiser.params, grads, optimizer, lr)
    return StepResult(loss=value, emitted=emitted)
