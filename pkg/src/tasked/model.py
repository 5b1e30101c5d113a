"""Feature extractor, activity classifier and subject discriminator.

Tensor layout inside the extractor is ``(batch, channels, time, sensors)``;
the input windows are ``(batch, n_channels, window)`` with channels ordered
by sensor group.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

NETWORKS = ("extractor", "classifier", "discriminator")


@dataclass
class ModelConfig:
    sensor_channels: list[int]
    window_size: int
    n_activities: int
    n_domains: int
    stem_channels: int = 32
    n_heads: int = 4
    temporal_kernel: int = 5
    attention_dropout: float = 0.1
    feature_dropout: float = 0.1
    drop_connect: float = 0.1
    discriminator_dropout: float = 0.2
    discriminator_channels: tuple[int, ...] = (32, 64, 128)
    discriminator_hidden: int = 10
    positional_encoding: bool = True

    def __post_init__(self):
        self.sensor_channels = [int(c) for c in self.sensor_channels]
        self.discriminator_channels = tuple(self.discriminator_channels)
        if not self.sensor_channels or min(self.sensor_channels) <= 0:
            raise ValueError("sensor_channels must list a positive channel count per sensor")
        if self.window_size % 8:
            raise ValueError(f"window_size must be divisible by 8, got {self.window_size}")
        if self.window_size // 8 < 8:
            raise ValueError(
                f"window_size {self.window_size} leaves {self.window_size // 8} embedding steps; "
                "the discriminator's three stride-2 convolutions need at least 8"
            )
        if self.stem_channels % self.n_heads:
            raise ValueError("stem_channels must be divisible by n_heads")
        for name in ("attention_dropout", "feature_dropout", "drop_connect", "discriminator_dropout"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.n_activities < 1 or self.n_domains < 1:
            raise ValueError("n_activities and n_domains must be positive")

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_channels)

    @property
    def embedding_channels(self) -> int:
        return self.stem_channels * 8

    @property
    def embedding_length(self) -> int:
        return self.window_size // 8

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def sinusoidal_encoding(channels: int, length: int) -> Tensor:
    """Fixed sine/cosine encoding of shape ``(channels, length)`` along time."""
    pos = torch.arange(length, dtype=torch.float64)[None, :]
    i = torch.arange(0, channels, 2, dtype=torch.float64)[:, None]
    angle = pos / torch.pow(10000.0, i / channels)
    pe = torch.zeros(channels, length, dtype=torch.float64)
    pe[0::2] = torch.sin(angle)
    pe[1::2] = torch.cos(angle[: channels // 2])
    return pe.float()


class SensorStems(nn.Module):
    """One kernel-3 convolution per sensor, stacked on a new trailing sensor axis."""

    def __init__(self, sensor_channels: list[int], out_channels: int = 32):
        super().__init__()
        self.sensor_channels = list(sensor_channels)
        self.convs = nn.ModuleList(
            nn.Conv1d(c, out_channels, kernel_size=3, stride=1, padding=1) for c in sensor_channels
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != sum(self.sensor_channels):
            raise ValueError(
                f"input has {x.shape[1]} channels, stems expect {sum(self.sensor_channels)} "
                f"grouped as {self.sensor_channels}"
            )
        groups = torch.split(x, self.sensor_channels, dim=1)
        return torch.stack([F.relu(conv(g)) for conv, g in zip(self.convs, groups)], dim=-1)


class PositionalEncoding(nn.Module):
    def __init__(self, channels: int, length: int, enabled: bool = True):
        super().__init__()
        self.enabled = enabled
        self.register_buffer("encoding", sinusoidal_encoding(channels, length)[:, :, None],
                             persistent=False)

    def forward(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return x + self.encoding.to(x.dtype)


class SpatialAttentionBlock(nn.Module):
    """Attention across sensors followed by a stride-2 temporal convolution.

    Query, key and value are kernel-1 convolutions, so each time step gets its
    own ``S x S`` attention matrix per head. During training, drop-connect
    zeroes attention entries and renormalizes each row; a row that loses every
    entry falls back to uniform weights.
    """

    def __init__(self, c_in: int, c_out: int, n_heads: int = 4, temporal_kernel: int = 5,
                 attention_dropout: float = 0.1, feature_dropout: float = 0.1,
                 drop_connect: float = 0.1):
        super().__init__()
        if c_in % n_heads:
            raise ValueError(f"c_in={c_in} not divisible by n_heads={n_heads}")
        self.c_in, self.c_out, self.n_heads = c_in, c_out, n_heads
        self.head_dim = c_in // n_heads
        self.drop_connect = drop_connect
        self.query = nn.Conv2d(c_in, c_in, 1)
        self.key = nn.Conv2d(c_in, c_in, 1)
        self.value = nn.Conv2d(c_in, c_in, 1)
        self.proj = nn.Conv2d(c_in, c_in, 1)
        self.attn_norm = nn.BatchNorm2d(c_in)
        self.attn_drop = nn.Dropout(attention_dropout)
        self.temporal = nn.Conv2d(c_in, c_out, (temporal_kernel, 1), stride=(2, 1),
                                  padding=(temporal_kernel // 2, 0))
        self.temporal_norm = nn.BatchNorm2d(c_out)
        self.feature_drop = nn.Dropout(feature_dropout)

    def _heads(self, t: Tensor) -> Tensor:
        b, _, w, s = t.shape
        return t.reshape(b, self.n_heads, self.head_dim, w, s).permute(0, 1, 3, 4, 2)

    def attention_weights(self, x: Tensor, drop_connect: bool | None = None) -> Tensor:
        """Attention of shape ``(batch, heads, time, S, S)``; rows sum to one."""
        q, k = self._heads(self.query(x)), self._heads(self.key(x))
        a = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if drop_connect is None:
            drop_connect = self.training
        if drop_connect and self.drop_connect > 0:
            a = apply_drop_connect(a, self.drop_connect)
        return a

    def forward(self, x: Tensor) -> Tensor:
        b, c, w, s = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {c}")
        if w % 2:
            raise ValueError(f"time length {w} is odd; stride-2 downsampling must be exact")
        a = self.attention_weights(x)
        v = self._heads(self.value(x))
        out = (a @ v).permute(0, 1, 4, 2, 3).reshape(b, c, w, s)
        x = x + self.attn_drop(self.attn_norm(self.proj(out)))
        x = F.relu(self.temporal_norm(self.temporal(x)))
        return self.feature_drop(x)


def apply_drop_connect(a: Tensor, rate: float) -> Tensor:
    keep = torch.rand_like(a) >= rate
    a = a * keep
    total = a.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(a, 1.0 / a.shape[-1])
    return torch.where(total > 0, a / total.clamp_min(torch.finfo(a.dtype).tiny), uniform)


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.stem_channels
        self.stems = SensorStems(cfg.sensor_channels, c)
        self.positional = PositionalEncoding(c, cfg.window_size, cfg.positional_encoding)
        self.blocks = nn.ModuleList(
            SpatialAttentionBlock(c * 2 ** i, c * 2 ** (i + 1), cfg.n_heads, cfg.temporal_kernel,
                                  cfg.attention_dropout, cfg.feature_dropout, cfg.drop_connect)
            for i in range(3)
        )

    def sensor_features(self, x: Tensor) -> Tensor:
        """Features before pooling over sensors: ``(batch, 8c, W/8, S)``."""
        t = self.positional(self.stems(x))
        for block in self.blocks:
            t = block(t)
        return t

    def forward(self, x: Tensor) -> Tensor:
        return self.sensor_features(x).mean(dim=-1)


class ActivityClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fc = nn.Linear(cfg.embedding_channels, cfg.n_activities)

    def forward(self, e: Tensor) -> Tensor:
        return self.fc(e.mean(dim=-1))


class SubjectDiscriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        layers, c_in, length = [], cfg.embedding_channels, cfg.embedding_length
        for c_out in cfg.discriminator_channels:
            layers += [
                nn.Conv1d(c_in, c_out, kernel_size=5, stride=2, padding=2),
                nn.LeakyReLU(0.2),
                nn.BatchNorm1d(c_out),
                nn.Dropout(cfg.discriminator_dropout),
            ]
            c_in, length = c_out, (length - 1) // 2 + 1
        self.blocks = nn.Sequential(*layers)
        self.flat_length = length
        self.fc1 = nn.Linear(c_in * length, cfg.discriminator_hidden)
        self.fc2 = nn.Linear(cfg.discriminator_hidden, cfg.n_domains)

    def forward(self, e: Tensor) -> Tensor:
        h = self.blocks(e).flatten(1)
        return self.fc2(F.relu(self.fc1(h)))


class TaskedModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.extractor = FeatureExtractor(cfg)
        self.classifier = ActivityClassifier(cfg)
        self.discriminator = SubjectDiscriminator(cfg)

    def network(self, name: str) -> nn.Module:
        if name not in NETWORKS:
            raise KeyError(f"unknown network {name!r}; expected one of {NETWORKS}")
        return getattr(self, name)

    def params(self, name: str) -> list[nn.Parameter]:
        return list(self.network(name).parameters())

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        e = self.extractor(x)
        return e, self.classifier(e), self.discriminator(e)


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: TaskedModel, path: str | Path, extra: dict | None = None) -> None:
    """Store parameters and buffers under canonical names plus a JSON manifest."""
    cfg = model.config
    manifest = {
        "format": "tasked-checkpoint/1",
        "window_size": cfg.window_size,
        "n_sensors": cfg.n_sensors,
        "sensor_channels": cfg.sensor_channels,
        "n_activities": cfg.n_activities,
        "n_domains": cfg.n_domains,
        "config": asdict(cfg),
        "config_hash": cfg.digest(),
    }
    if extra:
        manifest.update(extra)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TaskedModel, dict]:
    with np.load(path) as archive:
        manifest = json.loads(archive["__manifest__"].tobytes().decode())
        cfg = ModelConfig(**manifest["config"])
        if cfg.digest() != manifest["config_hash"]:
            raise ValueError(f"{path}: config hash mismatch")
        model = TaskedModel(cfg)
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != "__manifest__"}
    model.load_state_dict(state)
    return model, manifest
