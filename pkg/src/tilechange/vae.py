"""Resolution-adaptive convolutional beta-VAE over 32x32 multiband tiles.

Encoder: a fixed frequency-decomposition layer (Gaussian low-pass plus
high-pass residual, concatenated), two multi-scale stages of parallel
dilated 3x3 convolutions fused by a 1x1 convolution, two residual stages,
each stage ending in anti-aliased 2x downsampling, then global average
pooling and two linear heads producing a 128-d diagonal Gaussian
posterior. Decoder mirrors the hierarchy with nearest-neighbor upsampling
and a linear output layer.

Training minimizes mean squared reconstruction error plus beta-weighted
KL divergence, with stochastic rescaling of training tiles to simulate
varying ground sampling distance.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import (
    CheckpointError,
    DivergenceError,
    DomainError,
    ShapeError,
)
from .nn.tensor import Tensor, from_op, no_grad
from .rngs import substream

MAGIC = b"TCVAE001"
LOGVAR_CLAMP = 10.0


@dataclass(frozen=True)
class EncoderConfig:
    input_bands: int = 4
    tile_size: int = 32
    stage_channels: tuple = (32, 64, 128, 256)
    latent_dim: int = 128
    dilation_rates: tuple = (1, 2, 4)
    beta: float = 1.0
    lowpass_sigma: float = 1.0
    lowpass_kernel: int = 5
    residual_blocks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "dilation_rates", tuple(self.dilation_rates))
        if len(self.stage_channels) != 4:
            raise DomainError(f"expected 4 stages, got {len(self.stage_channels)}")
        if self.input_bands < 1:
            raise DomainError("input_bands must be >= 1")
        if self.tile_size % 16 != 0:
            raise DomainError("tile_size must be divisible by 16 (four halvings)")
        if list(self.dilation_rates) != sorted(set(self.dilation_rates)):
            raise DomainError("dilation_rates must be strictly increasing")
        if self.residual_blocks < 1:
            raise DomainError("residual_blocks must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 30
    scale_aug_min: float = 0.3
    scale_aug_max: float = 1.0
    seed: int = 0
    deterministic: bool = True
    val_fraction: float = 0.1
    mode: str = "fast"  # "fast" = float32, "check" = float64

    def __post_init__(self):
        if not 0.0 < self.scale_aug_min <= self.scale_aug_max <= 1.0:
            raise DomainError("need 0 < scale_aug_min <= scale_aug_max <= 1")
        if self.mode not in ("fast", "check"):
            raise DomainError(f"unknown numeric mode {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise DomainError("batch_size must be >= 1 and epochs >= 0")

    @property
    def dtype(self):
        return np.float32 if self.mode == "fast" else np.float64

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class VaeParams:
    """Named learnable tensors; shapes are a pure function of the config."""

    def __init__(self, cfg: EncoderConfig, tensors: dict, rng_seed: int):
        self.cfg = cfg
        self.tensors = tensors
        self.rng_seed = rng_seed

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int, dtype=np.float32) -> "VaeParams":
        rng = substream(seed, "init")
        tensors: dict = {}

        def conv(name, co, ci, k):
            std = np.sqrt(2.0 / (ci * k * k))
            tensors[name] = Tensor((rng.standard_normal((co, ci, k, k)) * std).astype(dtype), requires_grad=True)

        def dense(name, out_f, in_f):
            std = np.sqrt(2.0 / in_f)
            tensors[name + ".w"] = Tensor((rng.standard_normal((out_f, in_f)) * std).astype(dtype), requires_grad=True)
            tensors[name + ".b"] = Tensor(np.zeros(out_f, dtype=dtype), requires_grad=True)

        def norm(name, c):
            tensors[name + ".gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            tensors[name + ".shift"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

        chans = cfg.stage_channels
        width_in = 2 * cfg.input_bands  # frequency decomposition doubles channels
        # multi-scale stages
        for s, width in enumerate(chans[:2]):
            for j in range(len(cfg.dilation_rates)):
                conv(f"enc.s{s}.dil{j}.w", width, width_in, 3)
            conv(f"enc.s{s}.fuse.w", width, width * len(cfg.dilation_rates), 1)
            norm(f"enc.s{s}.norm", width)
            width_in = width
        # residual stages
        for s, width in enumerate(chans[2:], start=2):
            for r in range(cfg.residual_blocks):
                ci = width_in if r == 0 else width
                conv(f"enc.s{s}.b{r}.conv1.w", width, ci, 3)
                norm(f"enc.s{s}.b{r}.norm", width)
                conv(f"enc.s{s}.b{r}.conv2.w", width, width, 3)
                if ci != width:
                    conv(f"enc.s{s}.b{r}.skip.w", width, ci, 1)
            width_in = width
        dense("enc.mu", cfg.latent_dim, chans[3])
        dense("enc.logvar", cfg.latent_dim, chans[3])

        entry = cfg.tile_size // 16  # spatial size entering the decoder
        dense("dec.proj", chans[3] * entry * entry, cfg.latent_dim)
        dec_widths = [chans[3], chans[2], chans[1], chans[0], chans[0]]
        for s in range(4):
            conv(f"dec.s{s}.conv.w", dec_widths[s + 1], dec_widths[s], 3)
            norm(f"dec.s{s}.norm", dec_widths[s + 1])
        conv("dec.out.w", cfg.input_bands, chans[0], 3)
        tensors["dec.out.b"] = Tensor(np.zeros(cfg.input_bands, dtype=dtype), requires_grad=True)
        return cls(cfg, tensors, rng_seed=seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict:
        return {name: t.data for name, t in self.tensors.items()}

    def grads(self) -> dict:
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def restore(self, snap: dict) -> None:
        for name, t in self.tensors.items():
            np.copyto(t.data, snap[name])


def _bias_add(x: Tensor, b: Tensor) -> Tensor:
    y = x.data + b.data[None, :, None, None]

    def vjp(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return from_op(y, (x, b), vjp)


def freq_decompose(x: Tensor, kernel_size: int = 5, sigma: float = 1.0) -> Tensor:
    """Split into low-pass structure and high-pass residual, concatenated.

    The low channel is recomputed as the complement of the residual so that
    low + high reconstructs the input exactly (bitwise in float64; within
    one ulp in float32, where exact complements do not generally exist).
    """
    low0 = nn.gaussian_lowpass(x, kernel_size=kernel_size, sigma=sigma)
    high = nn.sub(x, low0)
    low = nn.sub(x, high)
    return nn.concat([low, high], axis=1)


def _multiscale_stage(x: Tensor, params: VaeParams, s: int) -> Tensor:
    cfg = params.cfg
    branches = [
        nn.conv2d(x, params[f"enc.s{s}.dil{j}.w"], dilation=d, padding="same")
        for j, d in enumerate(cfg.dilation_rates)
    ]
    fused = nn.conv2d(nn.concat(branches, axis=1), params[f"enc.s{s}.fuse.w"], padding="same")
    h = nn.leaky_relu(nn.channel_norm(fused, params[f"enc.s{s}.norm.gamma"], params[f"enc.s{s}.norm.shift"]))
    return nn.blurpool_downsample(h)


def _residual_stage(x: Tensor, params: VaeParams, s: int) -> Tensor:
    cfg = params.cfg
    h = x
    for r in range(cfg.residual_blocks):
        inner = nn.conv2d(h, params[f"enc.s{s}.b{r}.conv1.w"], padding="same")
        inner = nn.leaky_relu(
            nn.channel_norm(inner, params[f"enc.s{s}.b{r}.norm.gamma"], params[f"enc.s{s}.b{r}.norm.shift"])
        )
        inner = nn.conv2d(inner, params[f"enc.s{s}.b{r}.conv2.w"], padding="same")
        skip_name = f"enc.s{s}.b{r}.skip.w"
        skip = nn.conv2d(h, params[skip_name], padding="same") if skip_name in params.tensors else h
        h = nn.add(inner, skip)
    return nn.blurpool_downsample(h)


def _as_batch(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def encode(x, params: VaeParams) -> tuple:
    """Posterior (mu, logvar), each (B, latent_dim); logvar clamped to +-10."""
    cfg = params.cfg
    xb = _as_batch(x, params.dtype)
    if xb.ndim != 4 or xb.shape[1] != cfg.input_bands or xb.shape[2:] != (cfg.tile_size, cfg.tile_size):
        raise ShapeError(
            f"encode expects (B, {cfg.input_bands}, {cfg.tile_size}, {cfg.tile_size}), got {xb.shape}"
        )
    h = freq_decompose(xb, kernel_size=cfg.lowpass_kernel, sigma=cfg.lowpass_sigma)
    h = _multiscale_stage(h, params, 0)
    h = _multiscale_stage(h, params, 1)
    h = _residual_stage(h, params, 2)
    h = _residual_stage(h, params, 3)
    pooled = nn.global_avg_pool(h)
    mu = nn.linear(pooled, params["enc.mu.w"], params["enc.mu.b"])
    logvar = nn.clamp(
        nn.linear(pooled, params["enc.logvar.w"], params["enc.logvar.b"]),
        -LOGVAR_CLAMP,
        LOGVAR_CLAMP,
    )
    return mu, logvar


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """z = mu + sigma * eta with eta ~ N(0, I) drawn from `rng`."""
    eta = Tensor(rng.standard_normal(mu.shape).astype(mu.dtype))
    sigma = nn.exp(nn.scale(logvar, 0.5))
    return nn.add(mu, nn.mul(sigma, eta))


def decode(z, params: VaeParams) -> Tensor:
    """Reconstruction (B, C, tile, tile); linear output, unbounded."""
    cfg = params.cfg
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=params.dtype))
    if zt.ndim == 1:
        zt = nn.reshape(zt, (1, -1))
    if zt.shape[1] != cfg.latent_dim:
        raise ShapeError(f"decode expects latent dim {cfg.latent_dim}, got {zt.shape}")
    entry = cfg.tile_size // 16
    chans = cfg.stage_channels
    h = nn.linear(zt, params["dec.proj.w"], params["dec.proj.b"])
    h = nn.reshape(h, (zt.shape[0], chans[3], entry, entry))
    for s in range(4):
        h = nn.nn_upsample(h, 2)
        h = nn.conv2d(h, params[f"dec.s{s}.conv.w"], padding="same")
        h = nn.leaky_relu(nn.channel_norm(h, params[f"dec.s{s}.norm.gamma"], params[f"dec.s{s}.norm.shift"]))
    return _bias_add(nn.conv2d(h, params["dec.out.w"], padding="same"), params["dec.out.b"])


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over the batch of 0.5 * sum_d(mu^2 + sigma^2 - 1 - log sigma^2)."""
    b = mu.shape[0]
    terms = nn.sub(nn.add(nn.square(mu), nn.exp(logvar)), nn.add_const(logvar, 1.0))
    return nn.scale(nn.sum_all(terms), 0.5 / b)


def vae_loss(x: Tensor, recon: Tensor, mu: Tensor, logvar: Tensor, beta: float = 1.0) -> tuple:
    """(total, recon_mse, kl) with total = mse + beta * kl (Tensors)."""
    if x.shape != recon.shape:
        raise ShapeError(f"loss shapes differ: {x.shape} vs {recon.shape}")
    mse = nn.mean_all(nn.square(nn.sub(recon, x)))
    kl = kl_divergence(mu, logvar)
    total = nn.add(mse, nn.scale(kl, beta))
    if not np.isfinite(total.data):
        raise DivergenceError("non-finite loss")
    return total, mse, kl


def bilinear_resize(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of (C, H, W), endpoints aligned to corners."""
    c, h, w = values.shape

    def axis_weights(n_in, n_out):
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        i0 = np.floor(src).astype(int)
        i0 = np.minimum(i0, n_in - 2) if n_in > 1 else np.zeros_like(i0)
        frac = src - i0
        return i0, frac

    if h == 1 and w == 1:
        return np.broadcast_to(values, (c, out_h, out_w)).copy()
    r0, rf = axis_weights(h, out_h)
    rows = values[:, r0, :] * (1.0 - rf)[None, :, None] + values[:, r0 + 1, :] * rf[None, :, None]
    c0, cf = axis_weights(w, out_w)
    out = rows[:, :, c0] * (1.0 - cf)[None, None, :] + rows[:, :, c0 + 1] * cf[None, None, :]
    return out.astype(values.dtype)


def scale_augment(values: np.ndarray, rng: np.random.Generator, smin: float = 0.3, smax: float = 1.0) -> np.ndarray:
    """Resample a (C, S, S) tile down by a random factor and back up.

    Simulates acquisition at a coarser ground sampling distance. The draw
    is consumed from `rng` even when the rounded size is unchanged, so
    augmentation keeps the stream position deterministic.
    """
    c, s, s2 = values.shape
    if s != s2:
        raise ShapeError(f"scale_augment expects square tiles, got {values.shape}")
    factor = rng.uniform(smin, smax)
    m = int(round(s * factor))
    if m == s:
        return values
    down = bilinear_resize(values, m, m)
    return bilinear_resize(down, s, s)


@dataclass
class Checkpoint:
    params: VaeParams
    train_config: TrainConfig | None = None
    history: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def config(self) -> EncoderConfig:
        return self.params.cfg


def _stack_tiles(tiles, dtype) -> np.ndarray:
    arrs = []
    for t in tiles:
        arrs.append(np.asarray(getattr(t, "values", t), dtype=dtype))
    return np.stack(arrs)


def train(tiles, train_cfg: TrainConfig, enc_cfg: EncoderConfig, val_tiles=None) -> Checkpoint:
    """Train on normalized tiles; returns the best-validation checkpoint.

    Per epoch: seeded shuffle, batching, scale augmentation, forward,
    loss, backward, Adam. Aborts with partial history on divergence.
    """
    dtype = train_cfg.dtype
    data = _stack_tiles(tiles, dtype)
    n = data.shape[0]
    if n < train_cfg.batch_size:
        raise DomainError(f"need >= batch_size ({train_cfg.batch_size}) tiles, got {n}")
    if val_tiles is not None:
        val = _stack_tiles(val_tiles, dtype)
        train_data = data
    else:
        k = max(1, int(round(train_cfg.val_fraction * n)))
        perm = substream(train_cfg.seed, "shuffle", 0).permutation(n)
        val = data[perm[:k]]
        train_data = data[perm[k:]]
        if train_data.shape[0] < train_cfg.batch_size:
            raise DomainError("too few tiles left after validation split")

    params = VaeParams.init(enc_cfg, train_cfg.seed, dtype=dtype)
    state = nn.AdamState()
    ckpt = Checkpoint(params=params, train_config=train_cfg, history=[], best_epoch=-1)
    best_val = np.inf
    best_snap = params.snapshot()

    n_train = train_data.shape[0]
    for epoch in range(train_cfg.epochs):
        perm = substream(train_cfg.seed, "shuffle", epoch + 1).permutation(n_train)
        rng_aug = substream(train_cfg.seed, "augment", epoch)
        rng_samp = substream(train_cfg.seed, "sample", epoch)
        tot_sum = mse_sum = kl_sum = 0.0
        for start in range(0, n_train, train_cfg.batch_size):
            idx = perm[start : start + train_cfg.batch_size]
            xb = np.stack(
                [
                    scale_augment(train_data[i], rng_aug, train_cfg.scale_aug_min, train_cfg.scale_aug_max)
                    for i in idx
                ]
            )
            params.zero_grads()
            x = Tensor(xb)
            try:
                mu, logvar = encode(x, params)
                z = reparameterize(mu, logvar, rng_samp)
                recon = decode(z, params)
                total, mse, kl = vae_loss(x, recon, mu, logvar, beta=enc_cfg.beta)
                total.backward()
                nn.adam_step(params.arrays(), params.grads(), state, lr=train_cfg.learning_rate)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), history=ckpt.history) from exc
            b = len(idx)
            tot_sum += float(total.data) * b
            mse_sum += float(mse.data) * b
            kl_sum += float(kl.data) * b
        val_total, val_mse, val_kl = evaluate_loss(val, params, beta=enc_cfg.beta)
        record = {
            "epoch": epoch,
            "train_total": tot_sum / n_train,
            "train_mse": mse_sum / n_train,
            "train_kl": kl_sum / n_train,
            "val_total": val_total,
            "val_mse": val_mse,
            "val_kl": val_kl,
        }
        if not all(np.isfinite(v) for k, v in record.items() if k != "epoch"):
            raise DivergenceError(f"non-finite loss at epoch {epoch}", history=ckpt.history)
        ckpt.history.append(record)
        if val_total < best_val:
            best_val = val_total
            best_snap = params.snapshot()
            ckpt.best_epoch = epoch
    params.restore(best_snap)
    return ckpt


def evaluate_loss(tiles: np.ndarray, params: VaeParams, beta: float = 1.0, batch_size: int = 64) -> tuple:
    """Loss on held-out tiles using the posterior mean (no sampling)."""
    data = np.asarray(tiles, dtype=params.dtype)
    tot = mse_s = kl_s = 0.0
    n = data.shape[0]
    with no_grad():
        for start in range(0, n, batch_size):
            xb = Tensor(data[start : start + batch_size])
            mu, logvar = encode(xb, params)
            recon = decode(mu, params)
            total, mse, kl = vae_loss(xb, recon, mu, logvar, beta=beta)
            b = xb.shape[0]
            tot += float(total.data) * b
            mse_s += float(mse.data) * b
            kl_s += float(kl.data) * b
    return tot / n, mse_s / n, kl_s / n


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary checkpoint: magic, JSON header, float32 little-endian payload."""
    params = ckpt.params
    manifest = [[name, list(t.shape)] for name, t in params.tensors.items()]
    header = {
        "config": params.cfg.to_dict(),
        "train_config": ckpt.train_config.to_dict() if ckpt.train_config else None,
        "manifest": manifest,
        "best_epoch": ckpt.best_epoch,
        "history": ckpt.history,
        "rng_seed": params.rng_seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, t in params.tensors.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, expect_bands: int | None = None, dtype=np.float32) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path} is truncated (header)")
    try:
        header = json.loads(raw[start : start + hlen])
        cfg = EncoderConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (json.JSONDecodeError, KeyError, TypeError, DomainError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if expect_bands is not None and cfg.input_bands != expect_bands:
        raise CheckpointError(
            f"checkpoint is for {cfg.input_bands}-band input, pipeline expects {expect_bands}"
        )
    payload = raw[start + hlen :]
    need = sum(int(np.prod(shape)) for _, shape in manifest) * 4
    if len(payload) != need:
        raise CheckpointError(f"{path} payload is {len(payload)} bytes, expected {need}")
    tensors = {}
    off = 0
    for name, shape in manifest:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True)
        off += count * 4
    params = VaeParams(cfg, tensors, rng_seed=header.get("rng_seed", 0))
    tc = TrainConfig.from_dict(header["train_config"]) if header.get("train_config") else None
    return Checkpoint(params=params, train_config=tc, history=header.get("history", []), best_epoch=header.get("best_epoch", -1))
