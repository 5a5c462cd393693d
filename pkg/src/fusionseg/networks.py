"""3D U-Net / U-Net++ backbones and early, intermediate and late fusion.

Every model is wrapped in :class:`SegModel`, which owns the per-modality
standardization statistics and exposes two views of the output:
``head_outputs`` (one probability map per supervised head, used by the
loss) and ``forward`` (the single fused probability map).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataIntegrityError

MODALITIES = ("bmode", "doppler")
# keeps sigmoid outputs strictly inside (0, 1) in float32
PROB_EPS = 1e-6


@dataclass(frozen=True)
class BackboneConfig:
    kind: Literal["unet", "unetpp"] = "unet"
    base_filters: int | None = None
    depth: int = 4
    input_channels: int = 1
    deep_supervision: bool = True
    norm_order: Literal["relu_bn", "bn_relu"] = "relu_bn"

    def __post_init__(self):
        if self.kind not in ("unet", "unetpp"):
            raise ConfigError(f"unknown backbone {self.kind!r}")
        if self.base_filters is None:
            object.__setattr__(self, "base_filters", 16 if self.kind == "unet" else 32)
        if self.depth < 1 or self.base_filters < 1 or self.input_channels < 1:
            raise ConfigError("depth, base_filters and input_channels must be >= 1")
        if self.norm_order not in ("relu_bn", "bn_relu"):
            raise ConfigError(f"unknown norm order {self.norm_order!r}")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(self.base_filters * 2 ** i for i in range(self.depth + 1))

    def check_grid(self, shape) -> None:
        step = 2 ** self.depth
        if any(int(n) % step for n in shape):
            raise ConfigError(f"grid {tuple(shape)} is not divisible by 2**depth = {step}")


@dataclass(frozen=True)
class FusionConfig:
    strategy: Literal["single_modality", "early", "intermediate", "late"] = "early"
    modality: Literal["bmode", "doppler"] = "bmode"
    # intermediate only: feed the shared decoder skips from both encoders or the first
    intermediate_skips: Literal["both", "first"] = "both"

    def __post_init__(self):
        if self.strategy not in ("single_modality", "early", "intermediate", "late"):
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.intermediate_skips not in ("both", "first"):
            raise ConfigError(f"unknown skip source {self.intermediate_skips!r}")

    @property
    def modalities(self) -> tuple[str, ...]:
        if self.strategy == "single_modality":
            return (self.modality,)
        return MODALITIES

    @classmethod
    def parse(cls, text: str) -> "FusionConfig":
        """Parse ``single:bmode``, ``single:doppler``, ``early``, ``intermediate`` or ``late``."""
        if text.startswith("single:"):
            return cls("single_modality", text.split(":", 1)[1])
        return cls(text)

    def label(self) -> str:
        if self.strategy == "single_modality":
            return f"single:{self.modality}"
        return self.strategy


# -- building blocks -----------------------------------------------------------

class ConvBlock(nn.Sequential):
    """Two 3x3x3 'same' convolutions, each followed by ReLU (and batch norm)."""

    def __init__(self, cin: int, cout: int, norm: bool = True, order: str = "relu_bn"):
        layers: list[nn.Module] = []
        for c in (cin, cout):
            layers.append(nn.Conv3d(c, cout, 3, padding=1))
            if norm and order == "bn_relu":
                layers += [nn.BatchNorm3d(cout), nn.ReLU(inplace=True)]
            elif norm:
                layers += [nn.ReLU(inplace=True), nn.BatchNorm3d(cout)]
            else:
                layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class Encoder(nn.Module):
    """Contracting path; returns the feature map of every level, finest first."""

    def __init__(self, cin: int, filters, order: str):
        super().__init__()
        self.blocks = nn.ModuleList()
        for f in filters:
            self.blocks.append(ConvBlock(cin, f, norm=True, order=order))
            cin = f
        self.pool = nn.MaxPool3d(2)

    @property
    def channels(self) -> list[int]:
        return [b[0].out_channels for b in self.blocks]

    def forward(self, x):
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pool(x)
            x = block(x)
            feats.append(x)
        return feats


class UNetDecoder(nn.Module):
    def __init__(self, enc_channels, filters):
        super().__init__()
        depth = len(filters) - 1
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cur = enc_channels[depth]
        for i in reversed(range(depth)):
            self.ups.append(nn.ConvTranspose3d(cur, filters[i], 2, stride=2))
            self.blocks.append(ConvBlock(filters[i] + enc_channels[i], filters[i], norm=False))
            cur = filters[i]

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([up(x), skip], dim=1))
        return [x]


class UNetPPDecoder(nn.Module):
    """Nested dense skip pathways; node X(i,j) sees X(i,0..j-1) and up(X(i+1,j-1))."""

    def __init__(self, enc_channels, filters, order: str, deep_supervision: bool):
        super().__init__()
        self.depth = len(filters) - 1
        self.deep_supervision = deep_supervision
        self.ups = nn.ModuleDict()
        self.nodes = nn.ModuleDict()

        def ch(i, j):
            return enc_channels[i] if j == 0 else filters[i]

        for j in range(1, self.depth + 1):
            for i in range(self.depth - j + 1):
                key = f"{i}_{j}"
                self.ups[key] = nn.ConvTranspose3d(ch(i + 1, j - 1), filters[i], 2, stride=2)
                cin = sum(ch(i, k) for k in range(j)) + filters[i]
                self.nodes[key] = ConvBlock(cin, filters[i], norm=True, order=order)

    def forward(self, feats):
        x = {(i, 0): f for i, f in enumerate(feats)}
        for j in range(1, self.depth + 1):
            for i in range(self.depth - j + 1):
                key = f"{i}_{j}"
                inputs = [x[(i, k)] for k in range(j)] + [self.ups[key](x[(i + 1, j - 1)])]
                x[(i, j)] = self.nodes[key](torch.cat(inputs, dim=1))
        top = [x[(0, j)] for j in range(1, self.depth + 1)]
        return top if self.deep_supervision else top[-1:]


class Backbone(nn.Module):
    """One decoder fed by one encoder (single/early) or two (intermediate)."""

    def __init__(self, cfg: BackboneConfig, n_encoders: int = 1, skips: str = "both"):
        super().__init__()
        self.cfg = cfg
        filters = cfg.filters
        cin = cfg.input_channels // n_encoders
        self.encoders = nn.ModuleList(Encoder(cin, filters, cfg.norm_order) for _ in range(n_encoders))
        self.skips = skips
        enc_ch = [f * n_encoders for f in filters]
        if n_encoders > 1 and skips == "first":
            enc_ch = list(filters[:-1]) + [enc_ch[-1]]
        if cfg.kind == "unet":
            self.decoder = UNetDecoder(enc_ch, filters)
        else:
            self.decoder = UNetPPDecoder(enc_ch, filters, cfg.norm_order, cfg.deep_supervision)
        n_heads = cfg.depth if (cfg.kind == "unetpp" and cfg.deep_supervision) else 1
        self.heads = nn.ModuleList(nn.Conv3d(filters[0], 1, 1) for _ in range(n_heads))

    def features(self, x):
        if len(self.encoders) == 1:
            return self.encoders[0](x)
        per_enc = [enc(x[:, k:k + 1]) for k, enc in enumerate(self.encoders)]
        fused = []
        depth = len(per_enc[0]) - 1
        for level, parts in enumerate(zip(*per_enc)):
            if self.skips == "first" and level < depth:
                fused.append(parts[0])
            else:
                fused.append(torch.cat(parts, dim=1))
        return fused

    def forward(self, x):
        outs = self.decoder(self.features(x))
        return [torch.sigmoid(h(o)).clamp(PROB_EPS, 1 - PROB_EPS)
                for h, o in zip(self.heads, outs)]


def fuse_decisions(p1, p2):
    """Voxelwise mean of two probability maps (numpy arrays or tensors)."""
    if tuple(p1.shape) != tuple(p2.shape):
        raise DataIntegrityError(f"probability maps differ in shape: {tuple(p1.shape)} vs {tuple(p2.shape)}")
    return (p1 + p2) / 2


class SegModel(nn.Module):
    """Backbone x fusion strategy, mapping (N, C, D, H, W) inputs to
    (N, 1, D, H, W) probabilities."""

    def __init__(self, backbone_cfg: BackboneConfig, fusion_cfg: FusionConfig):
        super().__init__()
        self.backbone_cfg = backbone_cfg
        self.fusion_cfg = fusion_cfg
        s = fusion_cfg.strategy
        if s == "late":
            one = _replace(backbone_cfg, input_channels=1)
            self.branches = nn.ModuleList([Backbone(one), Backbone(one)])
        elif s == "intermediate":
            self.branches = nn.ModuleList([
                Backbone(_replace(backbone_cfg, input_channels=2), n_encoders=2,
                         skips=fusion_cfg.intermediate_skips)])
        else:
            self.branches = nn.ModuleList([Backbone(_replace(
                backbone_cfg, input_channels=len(fusion_cfg.modalities)))])
        n = len(fusion_cfg.modalities)
        self.register_buffer("input_mean", torch.zeros(n, dtype=torch.float64))
        self.register_buffer("input_std", torch.ones(n, dtype=torch.float64))
        _init_weights(self)

    @property
    def in_channels(self) -> int:
        return len(self.fusion_cfg.modalities)

    def _check(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise DataIntegrityError(
                f"expected input (N, {self.in_channels}, D, H, W), got {tuple(x.shape)}")
        self.backbone_cfg.check_grid(x.shape[2:])

    def branch_outputs(self, x) -> list[list[torch.Tensor]]:
        """Head outputs grouped per branch (two groups for late fusion)."""
        self._check(x)
        if self.fusion_cfg.strategy == "late":
            return [b(x[:, k:k + 1]) for k, b in enumerate(self.branches)]
        return [self.branches[0](x)]

    def head_outputs(self, x) -> list[torch.Tensor]:
        return [h for group in self.branch_outputs(x) for h in group]

    def forward(self, x):
        groups = [torch.stack(g).mean(0) for g in self.branch_outputs(x)]
        if len(groups) == 2:
            return fuse_decisions(*groups)
        return groups[0]

    def set_input_stats(self, mean, std) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=torch.float64))
        self.input_std.copy_(torch.as_tensor(std, dtype=torch.float64))

    def prepare_input(self, study) -> torch.Tensor:
        """Stack and standardize the modalities this model consumes, shape (C, D, H, W)."""
        chans = []
        for k, name in enumerate(self.fusion_cfg.modalities):
            v = getattr(study, name).data
            chans.append((v - float(self.input_mean[k])) / float(self.input_std[k]))
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.stack(chans), dtype=dtype)


def _replace(cfg: BackboneConfig, **kw) -> BackboneConfig:
    return BackboneConfig(**{**asdict(cfg), **kw})


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def build_unet(cfg: BackboneConfig, fusion: FusionConfig | None = None) -> SegModel:
    if cfg.kind != "unet":
        raise ConfigError("build_unet needs kind='unet'")
    return build_fused(cfg, fusion or _single_for(cfg))


def build_unetpp(cfg: BackboneConfig, fusion: FusionConfig | None = None) -> SegModel:
    if cfg.kind != "unetpp":
        raise ConfigError("build_unetpp needs kind='unetpp'")
    return build_fused(cfg, fusion or _single_for(cfg))


def _single_for(cfg: BackboneConfig) -> FusionConfig:
    if cfg.input_channels == 1:
        return FusionConfig("single_modality", "bmode")
    if cfg.input_channels == 2:
        return FusionConfig("early")
    raise ConfigError("only 1 (single modality) or 2 (early fusion) input channels are supported")


def build_fused(backbone_cfg: BackboneConfig, fusion_cfg: FusionConfig,
                grid=None) -> SegModel:
    """Build a model; ``grid`` (if given) is checked against the pooling depth."""
    if grid is not None:
        backbone_cfg.check_grid(grid)
    return SegModel(backbone_cfg, fusion_cfg)


@torch.no_grad()
def forward(model: SegModel, x) -> np.ndarray:
    """Inference-mode prediction for one unbatched (C, D, H, W) input."""
    model.eval()
    x = torch.as_tensor(x, dtype=next(model.parameters()).dtype)
    if x.ndim == 4:
        x = x[None]
    return model(x)[0].cpu().numpy()


def predict(model: SegModel, study) -> np.ndarray:
    """Probability map (D, H, W) for a study."""
    return forward(model, model.prepare_input(study))[0]


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "fusionseg-checkpoint/1"


def save_checkpoint(model: SegModel, path, extra: dict | None = None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "backbone": asdict(model.backbone_cfg),
        "fusion": asdict(model.fusion_cfg),
        "dtype": str(next(model.parameters()).dtype),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }, str(path))


def load_checkpoint(path) -> SegModel:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataIntegrityError(f"{path}: not a fusionseg checkpoint")
    model = SegModel(BackboneConfig(**blob["backbone"]), FusionConfig(**blob["fusion"]))
    if blob["dtype"] == "torch.float64":
        model.double()
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model


def checkpoint_extra(path) -> dict:
    return torch.load(str(path), map_location="cpu", weights_only=False)["extra"]


def model_digest(model: SegModel) -> str:
    """SHA-256 over the architecture and every state tensor (order-stable)."""
    h = hashlib.sha256()
    h.update(json.dumps([asdict(model.backbone_cfg), asdict(model.fusion_cfg)],
                        sort_keys=True).encode())
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
