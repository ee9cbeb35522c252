"""The stereo SR network: shared feature extractor, parallax attention, SR head."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import nn, pam
from .data import resize_weights
from . import tensor as T
from .tensor import Tensor

ABLATION_FLAGS = ("single_input", "no_pam", "no_transition", "no_atrous", "no_aspp_residual")


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 64
    scale: int = 4
    dilations: tuple = (1, 4, 8)
    aspp_groups: int = 3
    aspp_repeats: int = 2
    post_resblocks: int = 4
    single_input: bool = False
    no_pam: bool = False
    no_transition: bool = False
    no_atrous: bool = False
    no_aspp_residual: bool = False
    # add a bicubic upscale of the left input to the head output
    global_skip: bool = False

    def validate(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if not self.dilations or any(int(d) < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")
        if self.aspp_groups < 1 or self.aspp_repeats < 0 or self.post_resblocks < 0:
            raise ValueError("block counts out of range")
        return self

    @property
    def effective_dilations(self) -> tuple:
        return tuple(1 for _ in self.dilations) if self.no_atrous else tuple(int(d) for d in self.dilations)

    @property
    def uses_pam(self) -> bool:
        return not (self.single_input or self.no_pam)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_mapping(cls, kv: dict) -> "NetworkConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv[f.name]
            if f.name == "dilations":
                v = tuple(int(x) for x in str(v).split(",")) if isinstance(v, str) else tuple(v)
            elif isinstance(f.default, bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            else:
                v = int(v)
            kwargs[f.name] = v
        return cls(**kwargs).validate()


def parse_kv(text: str) -> dict:
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


DESK_CONFIG = NetworkConfig(channels=8, scale=2, aspp_groups=1, aspp_repeats=1, post_resblocks=1)


@dataclass
class ParamStore:
    """Ordered name -> tensor mapping; iteration order is insertion order."""

    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    version: int = 1

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def keys(self):
        return self.tensors.keys()

    def values(self):
        return self.tensors.values()

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data) for k, v in self.tensors.items())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True, op="leaf"))
                                      for k, v in self.tensors.items()), self.version)


OUTPUT_SCALE = 0.1


def param_count(store) -> int:
    return int(sum(t.size for t in store.values()))


# ---------------------------------------------------------------- build

def _add_aspp_block(params, name, rng, c, cfg: NetworkConfig):
    n = len(cfg.dilations)
    for g in range(cfg.aspp_groups):
        for b in range(n):
            nn.add_conv(params, f"{name}.group{g}.branch{b}", rng, 3, c, c)
        nn.add_conv(params, f"{name}.group{g}.merge", rng, 1, n * c, c, scale=nn.BRANCH_SCALE)


def build(config: NetworkConfig, seed: int = 0) -> ParamStore:
    """Instantiate every layer with seeded Kaiming-uniform weights."""
    config.validate()
    rng = np.random.default_rng(seed)
    c = config.channels
    p: "OrderedDict[str, Tensor]" = OrderedDict()
    nn.add_conv(p, "conv0", rng, 3, 3, c)
    nn.add_resblock(p, "resblock0", rng, c)
    for r in range(config.aspp_repeats):
        _add_aspp_block(p, f"aspp{r}", rng, c, config)
        nn.add_resblock(p, f"aspp{r}.resblock", rng, c)
    if config.uses_pam:
        pam.add_pam_params(p, rng, c, transition=not config.no_transition)
    elif config.no_pam and not config.single_input:
        nn.add_conv(p, "stack_fusion", rng, 1, 2 * c, c)
    for k in range(config.post_resblocks):
        nn.add_resblock(p, f"resblock3.{k}", rng, c)
    nn.add_upsampler(p, "upsample", rng, c, config.scale)
    nn.add_conv(p, "conv3_b", rng, 3, c, 3, scale=OUTPUT_SCALE)
    return ParamStore(p)


# ---------------------------------------------------------------- forward

def residual_aspp_block(params, name: str, x: Tensor, config: NetworkConfig) -> Tensor:
    """Cascade of ASPP groups; each group adds its output to its input.

    A group runs the dilated 3x3 branches (each followed by leaky ReLU) in
    parallel, concatenates them and merges with a 1x1 conv.
    """
    dil = config.effective_dilations
    for g in range(config.aspp_groups):
        branches = [nn.leaky_relu(nn.conv(params, f"{name}.group{g}.branch{b}", x, d))
                    for b, d in enumerate(dil)]
        y = nn.conv(params, f"{name}.group{g}.merge", T.concat(branches, axis=-1))
        x = y if config.no_aspp_residual else x + y
    return x


def residual_aspp_module(params, x: Tensor, config: NetworkConfig) -> Tensor:
    for r in range(config.aspp_repeats):
        x = residual_aspp_block(params, f"aspp{r}", x, config)
        x = nn.residual_block(params, f"aspp{r}.resblock", x)
    return x


def extract_features(params, x: Tensor, config: NetworkConfig) -> Tensor:
    x = nn.leaky_relu(nn.conv(params, "conv0", x))
    x = nn.residual_block(params, "resblock0", x)
    return residual_aspp_module(params, x, config)


def reconstruct(params, x: Tensor, config: NetworkConfig) -> Tensor:
    for k in range(config.post_resblocks):
        x = nn.residual_block(params, f"resblock3.{k}", x)
    x = nn.pixel_shuffle_upsample(params, "upsample", x, config.scale)
    return nn.conv(params, "conv3_b", x)


def bicubic_upscale(x: np.ndarray, s: int) -> np.ndarray:
    """Bicubic upscale over the ``H, W`` axes of ``(..., H, W, C)``."""
    wh = resize_weights(x.shape[-3], s).astype(x.dtype)
    ww = resize_weights(x.shape[-2], s).astype(x.dtype)
    return np.einsum("ih,jw,...hwc->...ijc", wh, ww, x)


def forward(left_lr, right_lr, params, config: NetworkConfig) -> dict:
    """Super-resolve the left view.

    Inputs are ``(H, W, 3)`` or batched ``(N, H, W, 3)``. Returns ``sr`` plus
    the attention maps and valid masks (``None`` for variants without PAM).
    """
    left_lr, right_lr = T.as_tensor(left_lr), T.as_tensor(right_lr)
    if left_lr.shape != right_lr.shape:
        raise ValueError(f"left/right shapes differ: {left_lr.shape} vs {right_lr.shape}")
    if left_lr.shape[-1] != 3 or left_lr.shape[-2] < 1:
        raise ValueError(f"expected (..., H, W, 3) input, got {left_lr.shape}")
    out = {"M_r2l": None, "M_l2r": None, "V_l2r": None, "V_r2l": None}
    feat_l = extract_features(params, left_lr, config)
    if config.single_input:
        fused = feat_l
    else:
        feat_r = extract_features(params, right_lr, config)
        if config.no_pam:
            fused = nn.conv(params, "stack_fusion", T.concat([feat_l, feat_r], axis=-1))
        else:
            fused, maps = pam.parallax_attention(feat_l, feat_r, params)
            out.update(maps)
    sr = reconstruct(params, fused, config)
    if config.global_skip:
        sr = sr + bicubic_upscale(left_lr.data, config.scale)
    out["sr"] = sr
    return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"PASSRCKP"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays, version: int = FORMAT_VERSION):
    """Write named float32 arrays in a little-endian container.

    Layout: 8-byte magic, uint32 format version, uint32 entry count, then per
    entry: uint32 name length, UTF-8 name, uint32 rank, rank x uint32
    extents, row-major float32 payload.
    """
    if isinstance(arrays, ParamStore):
        arrays = arrays.arrays()
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", version, len(arrays))
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", a.ndim)
        buf += struct.pack(f"<{a.ndim}I", *a.shape)
        buf += a.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = 16
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out


def store_from_arrays(arrays) -> ParamStore:
    return ParamStore(OrderedDict((k, Tensor(np.array(v, dtype=np.float32), requires_grad=True))
                                  for k, v in arrays.items()))


def config_path_for(ckpt) -> Path:
    return Path(str(ckpt) + ".cfg")


def save_model(path, store: ParamStore, config: NetworkConfig):
    save_checkpoint(path, store)
    config_path_for(path).write_text(config.to_text())


def infer_config(arrays, **overrides) -> NetworkConfig:
    """Recover a config from parameter names and shapes.

    Dilations cannot be recovered from shapes; the reference values are
    assumed unless overridden.
    """
    names = list(arrays)
    c = arrays["conv0.bias"].shape[0]
    up = arrays["upsample.bias"].shape[0]
    scale = int(round((up // c) ** 0.5))
    repeats = len({n.split(".")[0] for n in names if n.startswith("aspp") and n.split(".")[0][4:].isdigit()})
    groups = len({n.split(".")[1] for n in names if n.startswith("aspp0.group")})
    branches = len({n.split(".")[2] for n in names if n.startswith("aspp0.group0.branch")})
    post = len({n.split(".")[1] for n in names if n.startswith("resblock3.")})
    has_pam = any(n.startswith("pam.") for n in names)
    kw = dict(channels=c, scale=scale, aspp_groups=max(groups, 1), aspp_repeats=repeats,
              post_resblocks=post,
              dilations=(1, 4, 8) if branches in (0, 3) else tuple(range(1, branches + 1)),
              single_input=not has_pam and "stack_fusion.weight" not in arrays,
              no_pam="stack_fusion.weight" in arrays,
              no_transition=has_pam and "pam.transition.conv1.weight" not in arrays)
    kw.update(overrides)
    return NetworkConfig(**kw).validate()


# entries written by the trainer alongside the weights
TRAINING_PREFIXES = ("adam.", "train.")


def load_model(path, **overrides):
    arrays = load_checkpoint(path)
    params = OrderedDict((k, v) for k, v in arrays.items() if not k.startswith(TRAINING_PREFIXES))
    cfg_file = config_path_for(path)
    if cfg_file.exists():
        config = replace(NetworkConfig.from_text(cfg_file.read_text()), **overrides)
    else:
        config = infer_config(params, **overrides)
    return store_from_arrays(params), config.validate()
