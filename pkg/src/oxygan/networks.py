"""U-Net generator and PatchGAN discriminator built on tensor_core.

A :class:`Network` is a flat, ordered store of named parameters plus a list
of layer descriptors; the forward functions below walk the descriptors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from oxygan.errors import ConfigError, FormatError, ShapeError
from oxygan.tensor_core import io as oxt1
from oxygan.tensor_core import ops
from oxygan.tensor_core.ops import RunningStats
from oxygan.tensor_core.tensor import Tensor

NORM_KINDS = ("batch", "instance")
CHECKPOINT_FORMAT = "oxygan-checkpoint/1"


@dataclass
class NetworkConfig:
    image_size: int = 256
    in_channels: int = 3
    out_channels: int = 3
    base_filters: int = 64
    g_levels: int | None = None
    d_layers: int = 3
    norm_kind: str = "batch"
    dropout_p: float = 0.5
    unconditional_d: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.g_levels is None and _is_pow2(self.image_size):
            self.g_levels = int(math.log2(self.image_size))
        self.validate()

    def validate(self) -> None:
        if not _is_pow2(self.image_size) or self.image_size < 16:
            raise ConfigError(f"image_size must be a power of two >= 16, got {self.image_size}")
        max_levels = int(math.log2(self.image_size))
        if not 1 <= self.g_levels <= max_levels:
            raise ConfigError(f"g_levels must lie in [1, {max_levels}] for image_size "
                              f"{self.image_size}, got {self.g_levels}")
        if self.d_layers < 1:
            raise ConfigError(f"d_layers must be >= 1, got {self.d_layers}")
        if self.image_size // 2 ** self.d_layers < 3:
            raise ConfigError(f"d_layers={self.d_layers} leaves no logit map at image_size {self.image_size}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        for name in ("in_channels", "out_channels", "base_filters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> NetworkConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network config field(s): {sorted(unknown)}")
        return cls(**data)


def _is_pow2(n) -> bool:
    return isinstance(n, int) and n > 0 and n & (n - 1) == 0


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv | deconv
    in_ch: int
    out_ch: int
    kernel: int
    stride: int
    padding: int
    norm: bool = False
    bias: bool = True
    dropout: bool = False


@dataclass
class Network:
    kind: str
    config: NetworkConfig
    layers: list[LayerSpec]
    params: dict[str, Tensor] = field(default_factory=dict)
    stats: dict[str, RunningStats] = field(default_factory=dict)
    mode: str = "train"

    def train(self) -> Network:
        self.mode = "train"
        return self

    def eval(self) -> Network:
        self.mode = "eval"
        return self

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters followed by running statistics, in a stable order."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.stats.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise FormatError(f"{self.kind} state mismatch; missing={missing[:5]} extra={extra[:5]}")
        for name, arr in arrays.items():
            if arr.shape != expected[name].shape:
                raise ShapeError(f"checkpoint entry {name!r}", arr.shape, expected[name].shape)
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=np.float32)
        for name, st in self.stats.items():
            st.mean = np.array(arrays[f"{name}.running_mean"], dtype=np.float32)
            st.var = np.array(arrays[f"{name}.running_var"], dtype=np.float32)


def _init_params(net: Network, seed: int) -> Network:
    rng = np.random.default_rng(seed)
    std = net.config.init_std
    for spec in net.layers:
        if spec.kind == "conv":
            wshape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        else:
            wshape = (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
        w = (rng.standard_normal(wshape) * std).astype(np.float32)
        net.params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True, name=f"{spec.name}.weight")
        if spec.bias:
            net.params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True,
                                                     name=f"{spec.name}.bias")
        if spec.norm:
            gamma = (1.0 + rng.standard_normal(spec.out_ch) * std).astype(np.float32)
            net.params[f"{spec.name}.norm.gamma"] = Tensor(gamma, requires_grad=True, name=f"{spec.name}.norm.gamma")
            net.params[f"{spec.name}.norm.beta"] = Tensor(np.zeros(spec.out_ch, np.float32), requires_grad=True,
                                                          name=f"{spec.name}.norm.beta")
            if net.config.norm_kind == "batch":
                net.stats[f"{spec.name}.norm"] = RunningStats.fresh(spec.out_ch)
    return net


def generator_filters(cfg: NetworkConfig) -> list[int]:
    cap = cfg.base_filters * 8
    return [min(cfg.base_filters * 2 ** i, cap) for i in range(cfg.g_levels)]


def build_generator(cfg: NetworkConfig, seed: int = 0) -> Network:
    """U-Net: ``g_levels`` stride-2 downsamplers mirrored by transposed convs with skips."""
    cfg.validate()
    filt = generator_filters(cfg)
    levels = cfg.g_levels
    biased = cfg.norm_kind == "instance"
    layers = []
    for i in range(levels):
        outer, inner = i == 0, i == levels - 1
        layers.append(LayerSpec(f"down{i}", "conv", cfg.in_channels if outer else filt[i - 1], filt[i],
                                4, 2, 1, norm=not (outer or inner), bias=outer or inner or biased))
    for i in reversed(range(levels)):
        outer, inner = i == 0, i == levels - 1
        in_ch = filt[i] if inner else 2 * filt[i]
        out_ch = cfg.out_channels if outer else filt[i - 1]
        drop = not outer and i >= levels - 3 and cfg.dropout_p > 0
        layers.append(LayerSpec(f"up{i}", "deconv", in_ch, out_ch, 4, 2, 1,
                                norm=not outer, bias=outer or biased, dropout=drop))
    return _init_params(Network("generator", cfg, layers), seed)


def build_discriminator(cfg: NetworkConfig, seed: int = 1) -> Network:
    """PatchGAN over (x, y) channel-concatenated pairs; emits a map of logits."""
    cfg.validate()
    in_ch = cfg.out_channels if cfg.unconditional_d else cfg.in_channels + cfg.out_channels
    nf = cfg.base_filters
    biased = cfg.norm_kind == "instance"
    layers = [LayerSpec("block0", "conv", in_ch, nf, 4, 2, 1, norm=False, bias=True)]
    prev = nf
    for n in range(1, cfg.d_layers):
        cur = cfg.base_filters * min(2 ** n, 8)
        layers.append(LayerSpec(f"block{n}", "conv", prev, cur, 4, 2, 1, norm=True, bias=biased))
        prev = cur
    cur = cfg.base_filters * min(2 ** cfg.d_layers, 8)
    layers.append(LayerSpec(f"block{cfg.d_layers}", "conv", prev, cur, 4, 1, 1, norm=True, bias=biased))
    layers.append(LayerSpec("logits", "conv", cur, 1, 4, 1, 1, norm=False, bias=True))
    return _init_params(Network("discriminator", cfg, layers), seed)


def logit_map_size(image_size: int, d_layers: int) -> int:
    """Side of D's logit map: d_layers halvings, then two k4/s1/p1 convs (-1 each)."""
    return image_size // 2 ** d_layers - 2


def _apply(net: Network, spec: LayerSpec, h: Tensor) -> Tensor:
    p = net.params
    w = p[f"{spec.name}.weight"]
    b = p.get(f"{spec.name}.bias")
    if spec.kind == "conv":
        h = ops.conv2d(h, w, b, spec.stride, spec.padding)
    else:
        h = ops.conv_transpose2d(h, w, b, spec.stride, spec.padding)
    if spec.norm:
        gamma, beta = p[f"{spec.name}.norm.gamma"], p[f"{spec.name}.norm.beta"]
        if net.config.norm_kind == "batch":
            h = ops.batch_norm2d(h, gamma, beta, net.stats[f"{spec.name}.norm"], net.training)
        else:
            h = ops.instance_norm2d(h, gamma, beta)
    return h


def _check_input(net: Network, x: Tensor, channels: int, label: str) -> None:
    s = net.config.image_size
    if x.data.ndim != 4 or x.shape[1:] != (channels, s, s):
        raise ShapeError(f"{net.kind} {label} does not match config, expected N x {channels} x {s} x {s}",
                         x.shape)


def generator_forward(G: Network, x: Tensor, noise_on: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
    """ŷ = G(x, z); the noise z is dropout, active only when ``noise_on``."""
    cfg = G.config
    _check_input(G, x, cfg.in_channels, "input")
    if noise_on and rng is None:
        raise ConfigError("noise_on requires an rng")
    levels = cfg.g_levels
    downs, ups = G.layers[:levels], G.layers[levels:]
    feats = [x]
    h = x
    for i, spec in enumerate(downs):
        if i > 0:
            h = ops.leaky_relu(h, 0.2)
        h = _apply(G, spec, h)
        feats.append(h)
    for spec in ups:
        i = int(spec.name[2:])
        h = ops.relu(h)
        h = _apply(G, spec, h)
        if i == 0:
            return ops.tanh_act(h)
        if spec.dropout:
            h = ops.dropout(h, cfg.dropout_p, rng, active=noise_on)
        h = ops.concat_channels(feats[i], h)
    raise AssertionError("generator has no outermost layer")  # pragma: no cover


def discriminator_forward(D: Network, x: Tensor, y: Tensor) -> Tensor:
    """Patch logits for target ``y`` conditioned on input ``x``."""
    cfg = D.config
    _check_input(D, y, cfg.out_channels, "target")
    if cfg.unconditional_d:
        h = y
    else:
        _check_input(D, x, cfg.in_channels, "condition")
        if x.shape[0] != y.shape[0]:
            raise ShapeError("discriminator batch mismatch", x.shape, y.shape)
        h = ops.concat_channels(x, y)
    last = len(D.layers) - 1
    for idx, spec in enumerate(D.layers):
        h = _apply(D, spec, h)
        if idx != last:
            h = ops.leaky_relu(h, 0.2)
    return h


# ----------------------------------------------------------------- checkpoints

def save_checkpoint(path, networks: dict[str, Network], config_hash: str = "", extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.oxt`` (concatenated OXT1 records).

    Returns the manifest path.
    """
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".oxt")
    entries = {}
    chunks = []
    offset = 0
    for net_name, net in networks.items():
        for name, arr in net.state_arrays().items():
            rec = oxt1.encode(arr)
            entries[f"{net_name}/{name}"] = {"offset": offset, "nbytes": len(rec), "dims": list(arr.shape)}
            chunks.append(rec)
            offset += len(rec)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash,
        "blob": blob_path.name,
        "networks": {k: {"kind": n.kind, "config": n.config.to_dict()} for k, n in networks.items()},
        "entries": entries,
    }
    if extra:
        manifest["extra"] = extra
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_checkpoint_manifest(path) -> dict:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest_path}: not an oxygan checkpoint manifest")
    return manifest


def load_checkpoint(path) -> tuple[dict[str, Network], dict]:
    """Rebuild every network stored in a checkpoint; returns (networks, manifest)."""
    manifest_path = Path(path).with_suffix(".json")
    manifest = read_checkpoint_manifest(manifest_path)
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    builders = {"generator": build_generator, "discriminator": build_discriminator}
    nets = {}
    for net_name, meta in manifest["networks"].items():
        net = builders[meta["kind"]](NetworkConfig.from_dict(meta["config"]))
        prefix = f"{net_name}/"
        arrays = {}
        for key, ent in manifest["entries"].items():
            if key.startswith(prefix):
                arr, end = oxt1.decode(blob, ent["offset"])
                if end - ent["offset"] != ent["nbytes"]:
                    raise FormatError(f"checkpoint entry {key!r} has inconsistent length")
                arrays[key[len(prefix):]] = arr
        net.load_state_arrays(arrays)
        nets[net_name] = net
    return nets, manifest
