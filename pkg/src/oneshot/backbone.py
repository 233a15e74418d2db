"""Shared convolutional embedding network.

Layer stack (Koch-style, valid convolutions, stride 1)::

    conv 10x10 -> relu -> pool -> conv 7x7 -> relu -> pool
    -> conv 4x4 -> relu -> pool -> conv 4x4 -> relu -> flatten
    -> fc 4096 -> sigmoid [-> fc 128 -> l2-normalize]

Every siamese/triplet branch calls :func:`embed` with the same
:class:`BackboneParams`, so gradients from all branches land in one set.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

KOCH_CONVS = ((64, 10), (128, 7), (128, 4), (256, 4))
DESK_CONVS = ((8, 10), (16, 7), (16, 4), (32, 4))


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 105
    input_channels: int = 1
    conv_specs: tuple = KOCH_CONVS
    embedding_dim: int = 4096
    triplet_head_dim: int = 128
    include_triplet_head: bool = True
    init: str = "koch"  # weight-init scheme, see build_backbone

    def __post_init__(self):
        object.__setattr__(self, "conv_specs", tuple(tuple(int(v) for v in s) for s in self.conv_specs))
        if self.init not in ("koch", "fan_in"):
            raise ValueError(f"init must be 'koch' or 'fan_in', got {self.init!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "BackboneConfig":
        """``koch`` is the full-width stack; ``desk`` keeps the layout at 1/8 channel width."""
        if name == "koch":
            return cls(**overrides)
        if name == "desk":
            return cls(**{"conv_specs": DESK_CONVS, "init": "fan_in", **overrides})
        raise ValueError(f"unknown backbone preset {name!r} (expected 'koch' or 'desk')")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**{**d, "conv_specs": tuple(tuple(s) for s in d["conv_specs"])})

    def stage_sizes(self) -> list[int]:
        """Spatial size after every conv and pool stage.

        Raises ShapeError naming the first stage the input is too small for.
        """
        size, sizes = self.input_size, []
        last = len(self.conv_specs) - 1
        for i, (_, k) in enumerate(self.conv_specs):
            if size < k:
                raise ShapeError(f"conv{i + 1}: spatial size {size} smaller than kernel {k}")
            size = size - k + 1
            sizes.append(size)
            if i < last:
                if size % 2:
                    raise ShapeError(f"pool{i + 1}: spatial size {size} is odd")
                size //= 2
                sizes.append(size)
        return sizes

    @property
    def flatten_size(self) -> int:
        return self.conv_specs[-1][0] * self.stage_sizes()[-1] ** 2


@dataclass
class BackboneParams:
    """The single named parameter set for one model."""

    config: BackboneConfig
    params: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    @property
    def has_triplet_head(self) -> bool:
        return "head.weight" in self.params

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> None:
        for p in self:
            p.astype(dtype)


def build_backbone(config: BackboneConfig = BackboneConfig(), seed: int = 0) -> BackboneParams:
    """Initialise a backbone deterministically from ``seed``.

    ``init="koch"``: conv kernels ~ N(0, 0.01), conv biases 0.5, fully-connected
    weights ~ N(0, 0.2/sqrt(fan_in)), biases 0.

    ``init="fan_in"``: conv kernels ~ N(0, sqrt(2/fan_in)), fully-connected
    weights ~ N(0, 1/sqrt(fan_in)) with zero-mean head rows, all biases 0.
    Narrow stacks need this; under the Koch recipe their image signal shrinks
    ~5x per layer and the embeddings start out nearly constant.

    Both also create the scalar affine ``score.w``/``score.c`` (1, 0) used by
    the siamese head.
    """
    flat = config.flatten_size  # validates the stage chain
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def add(name, value):
        params[name] = Parameter(value, name)

    koch = config.init == "koch"
    in_ch = config.input_channels
    for i, (out_ch, k) in enumerate(config.conv_specs, start=1):
        std = 0.01 if koch else np.sqrt(2.0 / (in_ch * k * k))
        add(f"conv{i}.weight", rng.normal(0.0, std, (out_ch, in_ch, k, k)))
        add(f"conv{i}.bias", np.full(out_ch, 0.5 if koch else 0.0))
        in_ch = out_ch
    fc_scale = 0.2 if koch else 1.0
    add("fc.weight", rng.normal(0.0, fc_scale / np.sqrt(flat), (config.embedding_dim, flat)))
    add("fc.bias", np.zeros(config.embedding_dim))
    if config.include_triplet_head:
        dim = config.embedding_dim
        head = rng.normal(0.0, fc_scale / np.sqrt(dim), (config.triplet_head_dim, dim))
        if not koch:
            # Zero row sums: the sigmoid features' shared 0.5 offset then maps to 0.
            head -= head.mean(axis=1, keepdims=True)
        add("head.weight", head)
        add("head.bias", np.zeros(config.triplet_head_dim))
    add("score.w", np.ones(()))
    add("score.c", np.zeros(()))
    return BackboneParams(config, params)


def _as_input(params: BackboneParams, image) -> Tensor:
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=params["conv1.weight"].data.dtype)
    cfg = params.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if tuple(x.shape[-3:]) != expected or x.data.ndim not in (3, 4):
        raise ShapeError(f"embed: expected image {expected} (optionally batched), got {x.shape}")
    return x


def embed(params: BackboneParams, image) -> Tensor:
    """4096-d sigmoid embedding of one image (``C×H×W``) or a batch (``N×C×H×W``)."""
    h = _as_input(params, image)
    n_conv = len(params.config.conv_specs)
    for i in range(1, n_conv + 1):
        h = T.relu(T.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"]))
        if i < n_conv:
            h = T.maxpool2(h)
    h = T.flatten(h)
    return T.sigmoid(T.linear(h, params["fc.weight"], params["fc.bias"]))


def embed_triplet(params: BackboneParams, image) -> Tensor:
    """Unit-length 128-d embedding from the triplet head."""
    if not params.has_triplet_head:
        raise ValueError("embed_triplet: backbone was built without the triplet head")
    h = embed(params, image)
    return T.l2_normalize(T.linear(h, params["head.weight"], params["head.bias"]))
