"""Architecture and loss hyperparameters."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import ConfigError

FUSION_MODES = ("progressive", "one_off")


@dataclass
class GgpfnConfig:
    # T: number of depth-shrinking 3D convolutions; the encoder consumes 2T+1 slices
    T: int = 15
    # depth-shrinking convs per encoder group; the last two of a group form a residual block
    group_convs: tuple = (4, 2, 3, 6)
    channels: tuple = (16, 32, 64, 128)
    # widths of the decoder stages at scales 1..3; None mirrors ``channels``
    decoder_channels: tuple | None = None
    # 3x3 convs per global stage (resolutions /1 ... /16); one stride-2 conv follows
    global_convs: tuple = (2, 2, 3, 3, 2)
    global_channels: tuple = (16, 32, 64, 64, 128)
    patch_h: int = 256
    patch_w: int = 256
    overlap: int = 64
    hg: int = 224
    wg: int = 224
    alpha: float = 0.5
    beta: float = 0.5
    view_weights: tuple = (0.8, 0.1, 0.1)
    fusion_mode: str = "progressive"
    global_enabled: bool = True

    def __post_init__(self):
        for name in ("group_convs", "channels", "global_convs", "global_channels", "view_weights"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.decoder_channels is not None:
            self.decoder_channels = tuple(self.decoder_channels)

    @classmethod
    def tiny(cls, **overrides) -> "GgpfnConfig":
        """Small network for gradient checks and CPU learning runs."""
        base = dict(T=2, group_convs=(1, 1, 0, 0), channels=(4, 8, 8, 8),
                    global_convs=(2, 2, 3, 3, 2), global_channels=(4, 4, 8, 8, 8),
                    patch_h=32, patch_w=32, overlap=16, hg=32, wg=32)
        base.update(overrides)
        return cls(**base)

    @property
    def depth(self) -> int:
        return 2 * self.T + 1

    @property
    def dec_channels(self) -> tuple:
        return tuple(self.decoder_channels) if self.decoder_channels is not None else self.channels[:3]

    def validate(self) -> "GgpfnConfig":
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if len(self.group_convs) != 4 or any(n < 0 for n in self.group_convs):
            raise ConfigError(f"group_convs must be 4 non-negative ints, got {self.group_convs}")
        if sum(self.group_convs) != self.T:
            raise ConfigError(f"group_convs {self.group_convs} must sum to T={self.T}")
        if self.group_convs[0] < 1:
            raise ConfigError("the first encoder group needs at least one convolution")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"channels must be 4 positive ints, got {self.channels}")
        if len(self.dec_channels) != 3 or min(self.dec_channels) < 1:
            raise ConfigError(f"decoder_channels must be 3 positive ints, got {self.dec_channels}")
        if len(self.global_convs) != 5 or len(self.global_channels) != 5:
            raise ConfigError("global_convs and global_channels need 5 entries each")
        if self.patch_h % 8 or self.patch_w % 8 or self.patch_h <= 0 or self.patch_w <= 0:
            raise ConfigError(f"patch extents must be positive multiples of 8, got {(self.patch_h, self.patch_w)}")
        if self.hg % 32 or self.wg % 32 or self.hg <= 0 or self.wg <= 0:
            raise ConfigError(f"hg, wg must be positive multiples of 32, got {(self.hg, self.wg)}")
        if not 0 <= self.overlap < min(self.patch_h, self.patch_w):
            raise ConfigError(f"overlap must be in [0, patch), got {self.overlap}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if len(self.view_weights) != 3 or abs(sum(self.view_weights) - 1.0) > 1e-6:
            raise ConfigError(f"view_weights must be 3 values summing to 1, got {self.view_weights}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GgpfnConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)
