"""U-Net generator, convolutional discriminator, and the checkpoint format.

Parameters live in flat ``dict[str, Tensor]`` keyed by dotted layer names; the
forward functions are pure given ``(params, config, inputs)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import attend, attention_param_count, init_attention
from .numerics import (
    NumericError,
    Tensor,
    concat,
    conv2d,
    leaky_relu,
    linear,
    tanh,
    upsample_nearest,
)
from .prob_head import GaussianPrediction

Params = dict[str, Tensor]

CKPT_MAGIC = "sdm1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    image_channels: int = 1
    base_width: int = 32
    num_scales: int = 3
    width_mults: tuple[int, ...] = (1, 1, 2, 2)
    attention_scales: tuple[int, ...] | None = None
    resblocks_per_scale: int = 1
    attn_key_width: int = 32
    bias_hidden: int = 8
    bias_mode: str = "key"

    @property
    def in_channels(self) -> int:
        return self.image_channels + 4

    @property
    def out_channels(self) -> int:
        return 2 * self.image_channels

    def width(self, level: int) -> int:
        return self.base_width * self.width_mults[min(level, len(self.width_mults) - 1)]

    @property
    def attn_levels(self) -> tuple[int, ...]:
        if self.attention_scales is None:
            return tuple(lvl for lvl in (self.num_scales - 1, self.num_scales) if lvl >= 0)
        return tuple(self.attention_scales)


@dataclass(frozen=True)
class DiscriminatorConfig:
    image_channels: int = 1
    base_width: int = 32
    num_scales: int = 3
    width_mults: tuple[int, ...] = (1, 1, 2, 2)

    def width(self, level: int) -> int:
        return self.base_width * self.width_mults[min(level, len(self.width_mults) - 1)]


# --------------------------------------------------------------------------
# init helpers


def _conv(params: Params, name: str, rng, cin: int, cout: int, k: int = 3, gain: float = math.sqrt(2.0)):
    std = gain / math.sqrt(cin * k * k)
    params[f"{name}.w"] = Tensor(rng.standard_normal((cout, cin, k, k)) * std, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def _dense(params: Params, name: str, rng, cin: int, cout: int, gain: float = math.sqrt(2.0)):
    std = gain / math.sqrt(cin)
    params[f"{name}.w"] = Tensor(rng.standard_normal((cin, cout)) * std, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(cout), requires_grad=True)


def _apply_conv(params: Params, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = params[f"{name}.w"]
    return conv2d(x, w, params[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def _init_res(params: Params, name: str, rng, width: int):
    _conv(params, f"{name}.c1", rng, width, width)
    _conv(params, f"{name}.c2", rng, width, width, gain=0.5)


def _res(params: Params, name: str, x: Tensor) -> Tensor:
    h = _apply_conv(params, f"{name}.c1", leaky_relu(x))
    h = _apply_conv(params, f"{name}.c2", leaky_relu(h))
    return x + h


# --------------------------------------------------------------------------
# generator


def init_generator(config: UNetConfig, rng: np.random.Generator) -> Params:
    """He-scaled normal weights, zero biases (the log-variance bias starts at 0)."""
    p: Params = {}
    S = config.num_scales
    _conv(p, "stem", rng, config.in_channels, config.width(0))
    for lvl in range(S + 1):
        w = config.width(lvl)
        for r in range(config.resblocks_per_scale):
            _init_res(p, f"enc{lvl}.res{r}", rng, w)
        if lvl in config.attn_levels:
            init_attention(p, f"enc{lvl}.attn", w, config.attn_key_width, rng, config.bias_hidden)
        if lvl < S:
            _conv(p, f"down{lvl}", rng, w, config.width(lvl + 1))
    for lvl in range(S - 1, -1, -1):
        w = config.width(lvl)
        _conv(p, f"dec{lvl}.fuse", rng, config.width(lvl + 1) + w, w)
        for r in range(config.resblocks_per_scale):
            _init_res(p, f"dec{lvl}.res{r}", rng, w)
        if lvl in config.attn_levels:
            init_attention(p, f"dec{lvl}.attn", w, config.attn_key_width, rng, config.bias_hidden)
    _conv(p, "head", rng, config.width(0), config.out_channels, gain=0.1)
    return p


def generator_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count from the layer arithmetic."""
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    S = config.num_scales
    total = conv(config.in_channels, config.width(0))
    for lvl in range(S + 1):
        w = config.width(lvl)
        total += config.resblocks_per_scale * 2 * conv(w, w)
        if lvl in config.attn_levels:
            total += attention_param_count(w, config.attn_key_width, config.bias_hidden)
        if lvl < S:
            total += conv(w, config.width(lvl + 1))
    for lvl in range(S):
        w = config.width(lvl)
        total += conv(config.width(lvl + 1) + w, w)
        total += config.resblocks_per_scale * 2 * conv(w, w)
        if lvl in config.attn_levels:
            total += attention_param_count(w, config.attn_key_width, config.bias_hidden)
    return total + conv(config.width(0), config.out_channels)


def _pool_to(u: np.ndarray, level: int) -> np.ndarray:
    if level == 0:
        return u
    k = 2**level
    n, c, h, w = u.shape
    return u.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def generator_forward(params: Params, config: UNetConfig, x_t, m0, m_t, u_t, t: int, T: int) -> GaussianPrediction:
    """Predict per-pixel mean and log-variance from the current diffusion state.

    Inputs are (N, C, H, W) image and (N, 1, H, W) masks/uncertainty; the
    time channel is the constant plane ``t / T``.
    """
    x_graph = x_t if isinstance(x_t, Tensor) and x_t.requires_grad else None
    x_t = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    n, c, h, w = x_t.shape
    if c != config.image_channels:
        raise NumericError(f"image has {c} channels, model expects {config.image_channels}")
    planes = [np.asarray(a, dtype=np.float64) for a in (m0, m_t, u_t)]
    for a in planes:
        if a.shape != (n, 1, h, w):
            raise NumericError(f"mask/uncertainty shape {a.shape} != {(n, 1, h, w)}")
    S = config.num_scales
    if h % 2**S or w % 2**S:
        raise NumericError(f"spatial size {h}x{w} not divisible by 2^{S}")
    if not 0 <= t <= T:
        raise NumericError(f"t={t} outside [0, {T}]")
    time_plane = np.full((n, 1, h, w), t / T)
    if x_graph is None:
        inp = Tensor(np.concatenate([x_t, *planes, time_plane], axis=1))
    else:  # undetached unroll: keep the graph through the previous iterate
        inp = concat([x_graph, Tensor(np.concatenate([*planes, time_plane], axis=1))], axis=1)

    u_np = planes[2]
    feat = leaky_relu(_apply_conv(params, "stem", inp))
    skips = []
    for lvl in range(S + 1):
        for r in range(config.resblocks_per_scale):
            feat = _res(params, f"enc{lvl}.res{r}", feat)
        if lvl in config.attn_levels:
            feat = attend(params, f"enc{lvl}.attn", feat, _pool_to(u_np, lvl), config.bias_mode)
        if lvl < S:
            skips.append(feat)
            feat = leaky_relu(_apply_conv(params, f"down{lvl}", feat, stride=2))
    for lvl in range(S - 1, -1, -1):
        feat = concat([upsample_nearest(feat, 2), skips[lvl]], axis=1)
        feat = leaky_relu(_apply_conv(params, f"dec{lvl}.fuse", feat))
        for r in range(config.resblocks_per_scale):
            feat = _res(params, f"dec{lvl}.res{r}", feat)
        if lvl in config.attn_levels:
            feat = attend(params, f"dec{lvl}.attn", feat, _pool_to(u_np, lvl), config.bias_mode)
    out = _apply_conv(params, "head", leaky_relu(feat))
    mu = tanh(out[:, :c])
    return GaussianPrediction.from_raw(mu, out[:, c:])


def make_predictor(params: Params, config: UNetConfig):
    def predict(x_t, m0, m_t, u_t, t, T):
        return generator_forward(params, config, x_t, m0, m_t, u_t, t, T)

    return predict


# --------------------------------------------------------------------------
# discriminator


def init_discriminator(config: DiscriminatorConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    _conv(p, "stem", rng, config.image_channels, config.width(0))
    for lvl in range(config.num_scales):
        _conv(p, f"b{lvl}.conv", rng, config.width(lvl), config.width(lvl))
        _conv(p, f"b{lvl}.down", rng, config.width(lvl), config.width(lvl + 1))
    top = config.width(config.num_scales)
    _conv(p, "top", rng, top, top)
    _dense(p, "fc", rng, top, top)
    _dense(p, "out", rng, top, 1, gain=1.0)
    return p


def discriminator_forward(params: Params, config: DiscriminatorConfig, image) -> Tensor:
    """One logit per image in the batch, shape (N,)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 4 or x.shape[1] != config.image_channels:
        raise NumericError(f"discriminator input must be (N, {config.image_channels}, H, W), got {x.shape}")
    x = leaky_relu(_apply_conv(params, "stem", x))
    for lvl in range(config.num_scales):
        x = leaky_relu(_apply_conv(params, f"b{lvl}.conv", x))
        x = leaky_relu(_apply_conv(params, f"b{lvl}.down", x, stride=2))
    x = leaky_relu(_apply_conv(params, "top", x))
    x = x.mean(axis=(2, 3))
    x = leaky_relu(linear(x, params["fc.w"], params["fc.b"]))
    return linear(x, params["out.w"], params["out.b"]).reshape(x.shape[0])


# --------------------------------------------------------------------------
# frozen perceptual feature extractor


@dataclass(frozen=True)
class ExtractorConfig:
    image_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 32, 64)


def init_extractor(config: ExtractorConfig, rng: np.random.Generator) -> Params:
    """Random-weight 4-layer conv net; its parameters never receive gradient."""
    p: Params = {}
    cin = config.image_channels
    for i, cout in enumerate(config.widths):
        _conv(p, f"l{i}", rng, cin, cout)
        cin = cout
    for t in p.values():
        t.requires_grad = False
    return p


def extractor_features(params: Params, image: Tensor) -> list[Tensor]:
    """Taps after layers 2 and 4 (layers 2 and 4 downsample by 2)."""
    feats = []
    x = image
    for i in range(4):
        x = leaky_relu(_apply_conv(params, f"l{i}", x, stride=2 if i in (1, 3) else 1))
        if i in (1, 3):
            feats.append(x)
    return feats


# --------------------------------------------------------------------------
# checkpoints


def _config_items(config) -> list[tuple[str, str]]:
    items = []
    for f in fields(config):
        v = getattr(config, f.name)
        if v is None:
            s = "none"
        elif isinstance(v, tuple):
            s = ",".join(str(x) for x in v) if v else "empty"
        else:
            s = str(v)
        items.append((f.name, s))
    return items


def _parse_config(cls, raw: dict[str, str]):
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            raise CheckpointError(f"checkpoint header lacks config.{f.name}")
        s = raw[f.name]
        default = f.default
        if s == "none":
            kwargs[f.name] = None
        elif f.name in ("attention_scales", "widths", "width_mults"):
            kwargs[f.name] = () if s == "empty" else tuple(int(x) for x in s.split(","))
        elif isinstance(default, bool):
            kwargs[f.name] = s == "True"
        elif isinstance(default, int):
            kwargs[f.name] = int(s)
        else:
            kwargs[f.name] = s
    return cls(**kwargs)


_KINDS = {"generator": UNetConfig, "discriminator": DiscriminatorConfig}
_INITS = {"generator": init_generator, "discriminator": init_discriminator}


def save_checkpoint(params: Params, config, path, extra: dict[str, str] | None = None) -> None:
    """Write ASCII header, blank line, then little-endian float64 arrays."""
    kind = next(k for k, c in _KINDS.items() if isinstance(config, c))
    lines = [f"magic={CKPT_MAGIC}", f"version={CKPT_VERSION}", f"kind={kind}"]
    lines += [f"config.{k}={v}" for k, v in _config_items(config)]
    for k, v in (extra or {}).items():
        lines.append(f"meta.{k}={v}")
    for name, t in params.items():
        lines.append(f"param={name} shape={','.join(str(s) for s in t.shape)}")
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    Path(path).write_bytes(header + body)


def load_checkpoint(path, expected_config=None) -> tuple[Params, object, dict[str, str]]:
    """Read a checkpoint; returns ``(params, config, meta)``.

    Raises :class:`CheckpointError` on bad magic/version, truncation, manifest
    mismatch with the stored config, or a config differing from ``expected_config``.
    """
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: no header terminator")
    try:
        header_lines = blob[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: header is not ASCII") from None
    body = blob[sep + 2 :]
    kv: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines:
        if line.startswith("param="):
            name_part, _, shape_part = line[len("param="):].partition(" shape=")
            shape = tuple(int(s) for s in shape_part.split(",")) if shape_part else ()
            manifest.append((name_part, shape))
        else:
            k, eq, v = line.partition("=")
            if not eq:
                raise CheckpointError(f"{path}: malformed header line {line!r}")
            kv[k] = v
    if kv.get("magic") != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {kv.get('magic')!r}")
    if kv.get("version") != str(CKPT_VERSION):
        raise CheckpointError(f"{path}: unsupported version {kv.get('version')!r}")
    kind = kv.get("kind")
    if kind not in _KINDS:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")
    raw_cfg = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    config = _parse_config(_KINDS[kind], raw_cfg)
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: config {asdict(config)} != expected {asdict(expected_config)}")

    reference = _INITS[kind](config, np.random.default_rng(0))
    ref_manifest = [(n, t.shape) for n, t in reference.items()]
    if manifest != ref_manifest:
        raise CheckpointError(f"{path}: parameter manifest does not match config")
    need = sum(int(np.prod(s)) for _, s in manifest) * 8
    if len(body) != need:
        raise CheckpointError(f"{path}: body has {len(body)} bytes, expected {need}")
    params: Params = {}
    offset = 0
    for name, shape in manifest:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += count * 8
        params[name] = Tensor(arr, requires_grad=True)
    meta = {k[len("meta."):]: v for k, v in kv.items() if k.startswith("meta.")}
    return params, config, meta


def clone_params(params: Params, requires_grad: bool = True) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in params.items()}


__all__ = [
    "CheckpointError",
    "DiscriminatorConfig",
    "ExtractorConfig",
    "Params",
    "UNetConfig",
    "clone_params",
    "discriminator_forward",
    "extractor_features",
    "generator_forward",
    "generator_param_count",
    "init_discriminator",
    "init_extractor",
    "init_generator",
    "load_checkpoint",
    "make_predictor",
    "save_checkpoint",
]
