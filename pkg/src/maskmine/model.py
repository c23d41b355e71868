"""
Configurable 2D/3D U-Net with basic, residual or dense blocks, optional
squeeze-and-excitation, and an appendable 4-class error head.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ConsistencyError, FormatError, ShapeError

BLOCKS = ("basic", "residual", "dense")
CHECKPOINT_FORMAT = "maskmine-checkpoint"


@dataclass
class ModelConfig:
    dims: int = 2
    depth: int = 3
    base_channels: int = 16
    block: str = "basic"
    se_enabled: bool = False
    in_channels: int = 3
    out_channels: int = 2
    norm: bool = True

    def __post_init__(self):
        if isinstance(self.dims, str):
            self.dims = int(self.dims.upper().rstrip("D"))
        if self.dims not in (2, 3):
            raise ConfigurationError(f"dims must be 2 or 3, got {self.dims}")
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ConfigurationError("depth, base_channels and in_channels must all be >= 1")
        if self.block not in BLOCKS:
            raise ConfigurationError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.out_channels not in (2, 4):
            raise ConfigurationError(f"out_channels must be 2 or 4, got {self.out_channels}")


def _conv(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _norm(dims):
    return nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d


class ConvLayer(nn.Sequential):
    """conv -> norm -> ReLU."""

    def __init__(self, dims, cin, cout, norm=True):
        layers = [_conv(dims)(cin, cout, 3, padding=1, bias=not norm)]
        if norm:
            layers.append(_norm(dims)(cout))
        layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.flatten(2).mean(-1)
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s.view(*s.shape, *([1] * (x.dim() - 2)))


class ConvBlock(nn.Module):
    def __init__(self, dims, cin, cout, kind="basic", se=False, norm=True):
        super().__init__()
        self.kind = kind
        if kind == "dense":
            growth = max(cout // 2, 1)
            self.layers = nn.ModuleList([ConvLayer(dims, cin, growth, norm),
                                         ConvLayer(dims, cin + growth, growth, norm)])
            self.transition = _conv(dims)(cin + 2 * growth, cout, 1)
        else:
            self.layers = nn.ModuleList([ConvLayer(dims, cin, cout, norm), ConvLayer(dims, cout, cout, norm)])
        if kind == "residual":
            self.skip = _conv(dims)(cin, cout, 1) if cin != cout else nn.Identity()
        self.se = SqueezeExcite(cout) if se else None

    def forward(self, x):
        if self.kind == "dense":
            feats = [x]
            for layer in self.layers:
                feats.append(layer(torch.cat(feats, 1)))
            out = self.transition(torch.cat(feats, 1))
        else:
            out = x
            for layer in self.layers:
                out = layer(out)
            if self.kind == "residual":
                out = out + self.skip(x)
        if self.se is not None:
            out = self.se(out)
        return out


class UNet(nn.Module):
    """
    Encoder-decoder with skip connections. ``depth`` counts the pooling
    steps; channel width doubles per level. ``head`` is the original output
    layer; ``error_head`` is added by :func:`append_error_head`.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, b = cfg.dims, cfg.base_channels
        widths = [b * 2 ** i for i in range(cfg.depth + 1)]
        self.widths = widths
        kw = dict(kind=cfg.block, se=cfg.se_enabled, norm=cfg.norm)
        self.encoder = nn.ModuleList(
            [ConvBlock(d, cfg.in_channels, widths[0], **kw)]
            + [ConvBlock(d, widths[i - 1], widths[i], **kw) for i in range(1, cfg.depth + 1)]
        )
        self.decoder = nn.ModuleList([ConvBlock(d, widths[i + 1] + widths[i], widths[i], **kw)
                                      for i in range(cfg.depth)])
        self.head = _conv(d)(widths[0], cfg.out_channels, 1)
        self.error_head = None
        self.mining_variant = None

    @property
    def feature_channels(self) -> int:
        return self.widths[0]

    @property
    def head_kind(self) -> str:
        if self.error_head is not None or self.cfg.out_channels == 4:
            return "error"
        return "binary"

    @property
    def out_channels(self) -> int:
        return 4 if self.head_kind == "error" else 2

    def check_input(self, x):
        want = self.cfg.dims + 2
        if x.dim() != want:
            raise ShapeError(f"expected a {want}D batch (N, C, *spatial), got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"model takes {self.cfg.in_channels} input channels, got {x.shape[1]}")
        least = 2 ** self.cfg.depth
        if min(x.shape[2:]) < least:
            raise ConfigurationError(
                f"spatial size {tuple(x.shape[2:])} is smaller than 2^depth = {least}")

    def features(self, x):
        """Pre-head feature map (N, feature_channels, *spatial)."""
        self.check_input(x)
        pool = F.max_pool2d if self.cfg.dims == 2 else F.max_pool3d
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = pool(x, 2)
            x = block(x)
            skips.append(x)
        for i in reversed(range(self.cfg.depth)):
            x = F.interpolate(x, size=skips[i].shape[2:], mode="nearest")
            x = self.decoder[i](torch.cat([x, skips[i]], 1))
        return x

    def forward(self, x, head=None):
        f = self.features(x)
        head = head or self.head_kind
        if head == "error" and self.error_head is not None:
            return self.error_head(f)
        return self.head(f)


def build_unet(cfg: ModelConfig, seed: int = 0) -> UNet:
    """Construct a U-Net whose initial parameters depend only on ``cfg`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(cfg)


def count_parameters(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())


def append_error_head(m: UNet, seed: int = 0, variant: str | None = None,
                      init_std: float | None = None, prior=None, init: str = "random") -> UNet:
    """
    Return a copy of ``m`` with a kernel-size-1 convolution producing four
    error-class logits from the pre-head features. Existing parameters are
    copied unchanged; the binary head stays in place but is no longer used.

    The new weights use the default fan-in uniform initialisation, or a
    zero-mean normal with ``init_std`` if given. Much smaller weights starve
    the backbone of gradient during retraining. Biases start at zero unless
    ``prior`` (four class frequencies) is given, in which case they are set
    so the untrained head reproduces it: log-frequencies for the softmax
    (pwce) head, log-odds for the per-channel sigmoid (dice) head.

    ``init="binary"`` instead derives the new head from the trained binary
    head so the appended model starts out reproducing the binary prediction
    (see :func:`binary_seeded_head`).
    """
    if m.head_kind != "binary":
        raise ConsistencyError("model already has an error head")
    out = copy.deepcopy(m)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        conv = _conv(m.cfg.dims)(m.feature_channels, 4, 1)
        with torch.no_grad():
            if init_std is not None:
                conv.weight.normal_(0.0, init_std)
            conv.bias.copy_(prior_bias(prior, variant) if prior is not None else torch.zeros(4))
            if init == "binary":
                binary_seeded_head(conv, m.head, variant, prior)
            elif init != "random":
                raise ConfigurationError(f"unknown error-head init {init!r}")
    conv.to(next(m.parameters()).device)
    out.error_head = conv
    out.mining_variant = variant
    return out


def prior_bias(prior, variant: str | None, floor: float = 1e-4) -> torch.Tensor:
    p = torch.as_tensor(prior, dtype=torch.float64).clamp(floor, 1 - floor)
    if p.shape != (4,):
        raise ShapeError(f"prior must hold 4 class frequencies, got shape {tuple(p.shape)}")
    if variant == "dice":
        return torch.logit(p).float()
    return (p / p.sum()).log().float()


@torch.no_grad()
def binary_seeded_head(conv, head, variant: str | None, prior=None, floor: float = 1e-4):
    """
    Overwrite ``conv`` (4 outputs) with rows built from the binary ``head``.

    Softmax (pwce) head: TN/FP copy the background row, FN/TP the foreground
    row, so argmax // 2 equals the binary argmax; the biases add
    log(p_c / p_group) to split each group by class frequency. Sigmoid
    (dice) head: TP gets foreground minus background (sigmoid of it is the
    binary foreground probability) and TN the negation; FP/FN keep their
    existing initialisation.
    """
    w, b = head.weight.detach(), head.bias.detach()
    bg, fg = (w[0], b[0]), (w[1], b[1])
    if variant == "dice":
        conv.weight[3], conv.bias[3] = fg[0] - bg[0], fg[1] - bg[1]
        conv.weight[0], conv.bias[0] = bg[0] - fg[0], bg[1] - fg[1]
        return conv
    p = torch.full((4,), 0.25, dtype=torch.float64) if prior is None else \
        torch.as_tensor(prior, dtype=torch.float64).clamp(floor, 1 - floor)
    for c, (wr, br) in enumerate((bg, bg, fg, fg)):
        group = p[0] + p[1] if c < 2 else p[2] + p[3]
        conv.weight[c] = wr
        conv.bias[c] = br + torch.log(p[c] / group).float()
    return conv


def freeze_binary_head(m: UNet):
    for p in m.head.parameters():
        p.requires_grad_(False)


@torch.no_grad()
def forward(m: UNet, batch) -> torch.Tensor:
    """Evaluation-mode forward pass (running normalization statistics)."""
    was_training = m.training
    m.eval()
    try:
        x = torch.as_tensor(batch, dtype=torch.float32, device=next(m.parameters()).device)
        return m(x)
    finally:
        m.train(was_training)


def save_checkpoint(m: UNet, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": json.dumps(asdict(m.cfg), sort_keys=True),
        "head": m.head_kind,
        "has_error_head": m.error_head is not None,
        "mining_variant": m.mining_variant or "",
        "meta": json.dumps(meta or {}, sort_keys=True),
        "state": {k: v.detach().cpu().clone() for k, v in m.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a maskmine checkpoint")
    return payload


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    expected_head: str | None = None) -> UNet:
    """
    Rebuild a model from ``path``. If ``expected_config`` or
    ``expected_head`` are given, a mismatching checkpoint raises
    ``ConsistencyError``.
    """
    payload = read_checkpoint(path)
    cfg = ModelConfig(**json.loads(payload["config"]))
    if expected_config is not None and asdict(expected_config) != asdict(cfg):
        raise ConsistencyError(f"checkpoint config {asdict(cfg)} differs from expected {asdict(expected_config)}")
    if expected_head is not None and payload["head"] != expected_head:
        raise ConsistencyError(f"checkpoint has a {payload['head']} head, expected {expected_head}")
    with torch.random.fork_rng(devices=[]):
        m = UNet(cfg)
        if payload["has_error_head"]:
            m.error_head = _conv(cfg.dims)(m.feature_channels, 4, 1)
    m.load_state_dict(payload["state"], strict=True)
    m.mining_variant = payload.get("mining_variant") or None
    m.meta = json.loads(payload["meta"])
    return m
