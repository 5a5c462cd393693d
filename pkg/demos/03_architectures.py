"""
Backbones and fusion strategies
===============================

Both backbones come in four input configurations: one modality, early
fusion (two input channels), intermediate fusion (two encoders feeding one
decoder) and late fusion (two whole networks whose outputs are averaged).
"""

import torch

from fusionseg.networks import BackboneConfig, FusionConfig, build_fused

###############################################################################
# Parameter counts at full width. U-Net++ doubles its filters per level from
# a base of 32, U-Net from 16.

for kind in ("unet", "unetpp"):
    cfg = BackboneConfig(kind)
    print(kind, "filters per level", cfg.filters)
    for name in ("single:bmode", "early", "intermediate", "late"):
        model = build_fused(cfg, FusionConfig.parse(name))
        n = sum(p.numel() for p in model.parameters())
        print(f"  {name:<14} {n / 1e6:6.2f} M parameters, {model.in_channels} input channel(s)")

###############################################################################
# With deep supervision U-Net++ has one head per nested level. Training
# averages the loss over heads; inference averages their probabilities.

torch.manual_seed(0)
model = build_fused(BackboneConfig("unetpp", base_filters=4), FusionConfig.parse("early")).eval()
x = torch.randn(1, 2, 32, 32, 32)
with torch.no_grad():
    heads = model.head_outputs(x)
    out = model(x)
print("heads:", len(heads), "final shape:", tuple(out.shape))
print("max |final - mean(heads)|:", float((out - torch.stack(heads).mean(0)).abs().max()))

###############################################################################
# Late fusion keeps the two submodels separate until the very end.

late = build_fused(BackboneConfig("unet", base_filters=4), FusionConfig.parse("late")).eval()
with torch.no_grad():
    per_branch = [torch.stack(g).mean(0) for g in late.branch_outputs(x)]
    fused = late(x)
print("late fusion = mean of submodels:", torch.allclose(fused, (per_branch[0] + per_branch[1]) / 2))
