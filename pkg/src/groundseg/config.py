"""Model and run configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .losses import LossConfig


@dataclass(frozen=True)
class ModelDims:
    """Sizes shared by the vision stack and the language model."""

    canvas: int = 64
    channels: int = 64          # global feature channels (c)
    local_channels: int = 32    # early local feature channels (c')
    enc_channels: tuple[int, int] = (16, 32)  # hidden widths before the c' tap
    dec_channels: tuple[int, ...] = (32, 16, 8, 6)  # widths of the 4 upsample stages
    embed_dim: int = 128        # LM width (d)
    proj_dim: int = 32          # seg-token conditioning width (d_proj)
    heads: int = 4
    blocks: int = 2
    mlp_factor: int = 2
    context: int = 160
    vocab_size: int = 512

    def __post_init__(self):
        if self.canvas % 16 != 0:
            raise ValueError("canvas must be divisible by 16")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if len(self.dec_channels) != 4:
            raise ValueError("decoder uses exactly four upsample stages")

    @property
    def grid(self) -> int:
        return self.canvas // 16

    @property
    def n_img(self) -> int:
        return self.grid * self.grid


@dataclass
class RunConfig:
    """Everything a training run needs; serializes to/from plain JSON."""

    data_dir: str | None = None
    dims: ModelDims = field(default_factory=ModelDims)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: str = "adamw"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_json(self) -> str:
        d = asdict(self)
        d["dims"]["enc_channels"] = list(self.dims.enc_channels)
        d["dims"]["dec_channels"] = list(self.dims.dec_channels)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        d = json.loads(text)
        dims_d = d.pop("dims", {})
        for key in ("enc_channels", "dec_channels"):
            if key in dims_d:
                dims_d[key] = tuple(dims_d[key])
        loss_d = d.pop("loss", {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(dims=ModelDims(**dims_d), loss=LossConfig(**loss_d), **d)
