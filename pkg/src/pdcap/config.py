"""Model hyper-parameters shared by the decoder and the complexity accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass

from pdcap.errors import ConfigError

MODES = ("plain", "p", "d", "pd")


def normalize_mode(mode):
    m = str(mode).lower().replace("+", "")
    if m not in MODES:
        raise ConfigError(f"attention mode must be one of {MODES}, got {mode!r}")
    return m


def uses_pyramid(mode):
    return normalize_mode(mode) in ("p", "pd")


def uses_channel(mode):
    return normalize_mode(mode) in ("d", "pd")


@dataclass(frozen=True)
class ModelConfig:
    """Sizes of one decoder. Defaults match a 7x7x2048 ResNet-101 grid.

    ``bins`` is only consulted in pyramid modes; plain and channel-only modes
    always use the single original level.
    """

    grid_w: int = 7
    grid_h: int = 7
    channels: int = 2048
    d_model: int = 1024
    embed: int = 1024
    hidden: int = 512
    vocab: int = 8000
    t_max: int = 50
    bins: tuple = (1, 2, 4)
    mode: str = "pd"
    att_width: int = 512
    chan_width: int = 512
    literal_scaling: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))
        object.__setattr__(self, "bins", tuple(int(b) for b in self.bins))
        for name in ("grid_w", "grid_h", "channels", "d_model", "embed", "hidden", "vocab",
                     "t_max", "att_width", "chan_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        bins = self.effective_bins
        if bins[0] != 1 or any(b2 <= b1 for b1, b2 in zip(bins, bins[1:])):
            raise ConfigError(f"bins must start at 1 and increase strictly, got {bins}")
        if bins[-1] > min(self.grid_w, self.grid_h):
            raise ConfigError(f"bin {bins[-1]} exceeds the {self.grid_w}x{self.grid_h} grid")

    @property
    def regions(self):
        return self.grid_w * self.grid_h

    @property
    def effective_bins(self):
        return self.bins if uses_pyramid(self.mode) else (1,)

    @property
    def pyramid_rows(self):
        return sum((self.grid_w - b + 1) * (self.grid_h - b + 1) for b in self.effective_bins)

    def to_dict(self):
        d = asdict(self)
        d["bins"] = list(self.bins)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["bins"] = tuple(d.get("bins", (1, 2, 4)))
        return cls(**d)
