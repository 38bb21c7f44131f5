"""DeepLabV3+ with a MobileNetV2 backbone and a 1x1 input adapter to 3 channels."""

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import mobilenet_v2

DOWNSAMPLING = 16
LOW_LEVEL_BLOCKS = 4  # backbone[:4] runs at stride 4 with 24 channels
BACKBONE_BLOCKS = 18  # MobileNetV2 features[0:18]; the final 1280-wide conv is dropped


def _dilate_tail(backbone: nn.Sequential, first: int = 14, dilation: int = 2) -> None:
    """Turn the stride-32 stage into a dilated stride-16 stage (output stride 16)."""
    for block in list(backbone)[first:]:
        for m in block.modules():
            if isinstance(m, nn.Conv2d) and m.kernel_size == (3, 3):
                m.stride = (1, 1)
                m.dilation = (dilation, dilation)
                m.padding = (dilation, dilation)


class ASPP(nn.Module):
    def __init__(self, in_ch, out_ch=256, rates=(6, 12, 18), dropout_p=0.1):
        super().__init__()

        def branch(k, d):
            return nn.Sequential(
                nn.Conv2d(in_ch, out_ch, k, padding=0 if k == 1 else d, dilation=d, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            )

        self.branches = nn.ModuleList([branch(1, 1)] + [branch(3, r) for r in rates])
        # no BN on the pooled branch: a 1x1 map with batch size 1 has no batch statistics
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_ch, out_ch, 1),
                                  nn.ReLU(inplace=True))
        self.project = nn.Sequential(
            nn.Conv2d(out_ch * (len(rates) + 2), out_ch, 1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout_p),
        )

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        pooled = self.pool(x)
        feats.append(pooled.expand(-1, -1, x.shape[-2], x.shape[-1]))
        return self.project(torch.cat(feats, dim=1))


class DeepLabV3Plus(nn.Module):
    def __init__(self, in_channels, num_classes, dropout_p=0.1, identity_adapter=False):
        super().__init__()
        self.adapter = nn.Conv2d(in_channels, 3, kernel_size=1)
        self.reset_adapter(identity_adapter)
        features = mobilenet_v2(weights=None).features
        self.backbone = nn.Sequential(*list(features)[:BACKBONE_BLOCKS])
        _dilate_tail(self.backbone)
        self.aspp = ASPP(320, 256, dropout_p=dropout_p)
        self.low_proj = nn.Sequential(nn.Conv2d(24, 48, 1, bias=False), nn.BatchNorm2d(48),
                                      nn.ReLU(inplace=True))
        self.decoder = nn.Sequential(
            nn.Conv2d(256 + 48, 256, 3, padding=1, bias=False),
            nn.BatchNorm2d(256),
            nn.ReLU(inplace=True),
            nn.Conv2d(256, 256, 3, padding=1, bias=False),
            nn.BatchNorm2d(256),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(256, num_classes, 1)

    def reset_adapter(self, identity: bool) -> None:
        w = self.adapter.weight
        with torch.no_grad():
            if identity and w.shape[1] == 3:
                w.zero_()
                w[:, :, 0, 0] = torch.eye(3)
            else:
                w.normal_(0.0, 1.0).div_(w.shape[1])
            self.adapter.bias.zero_()

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % DOWNSAMPLING, (-w) % DOWNSAMPLING
        if ph or pw:
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")
        x = self.adapter(x)
        low = self.backbone[:LOW_LEVEL_BLOCKS](x)
        high = self.aspp(self.backbone[LOW_LEVEL_BLOCKS:](low))
        high = F.interpolate(high, size=low.shape[-2:], mode="bilinear", align_corners=False)
        y = self.decoder(torch.cat([high, self.low_proj(low)], dim=1))
        y = self.classifier(y)
        y = F.interpolate(y, size=x.shape[-2:], mode="bilinear", align_corners=False)
        if ph or pw:
            y = y[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
        return y
