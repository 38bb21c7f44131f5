"""Regularized U-Net: bilinear upsampling, batch norm and dropout, any input channel count."""

import torch
import torch.nn as nn
import torch.nn.functional as F

DOWNSAMPLING = 16


class DoubleConv(nn.Module):
    """(conv 3x3 -> [BN] -> ReLU) x 2, then dropout."""

    def __init__(self, in_ch, out_ch, batchnorm=True, dropout_p=0.0):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(((in_ch, out_ch), (out_ch, out_ch))):
            layers.append(nn.Conv2d(a, b, kernel_size=3, padding=1, bias=not batchnorm))
            if batchnorm:
                layers.append(nn.BatchNorm2d(b))
            layers.append(nn.ReLU(inplace=True))
        if dropout_p > 0:
            layers.append(nn.Dropout(dropout_p))
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class Down(nn.Module):
    def __init__(self, in_ch, out_ch, batchnorm=True, dropout_p=0.0):
        super().__init__()
        self.pool = nn.MaxPool2d(2)
        self.conv = DoubleConv(in_ch, out_ch, batchnorm, dropout_p)

    def forward(self, x):
        return self.conv(self.pool(x))


class Up(nn.Module):
    """Bilinear x2 upsampling, 3x3 conv halving channels, concat skip, DoubleConv."""

    def __init__(self, in_ch, skip_ch, out_ch, batchnorm=True, dropout_p=0.0):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, in_ch // 2, kernel_size=3, padding=1)
        self.conv = DoubleConv(in_ch // 2 + skip_ch, out_ch, batchnorm, dropout_p)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.reduce(x)
        return self.conv(torch.cat([skip, x], dim=1))


class RUNet(nn.Module):
    """Four-level U-Net with widths base, 2*base, ..., 16*base."""

    def __init__(self, in_channels, num_classes, base_width=64, batchnorm=True, dropout_p=0.25):
        super().__init__()
        w = [base_width * 2 ** i for i in range(5)]
        kw = dict(batchnorm=batchnorm, dropout_p=dropout_p)
        self.inc = DoubleConv(in_channels, w[0], **kw)
        self.down1 = Down(w[0], w[1], **kw)
        self.down2 = Down(w[1], w[2], **kw)
        self.down3 = Down(w[2], w[3], **kw)
        self.down4 = Down(w[3], w[4], **kw)
        self.up1 = Up(w[4], w[3], w[3], **kw)
        self.up2 = Up(w[3], w[2], w[2], **kw)
        self.up3 = Up(w[2], w[1], w[1], **kw)
        self.up4 = Up(w[1], w[0], w[0], **kw)
        self.classifier = nn.Conv2d(w[0], num_classes, kernel_size=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % DOWNSAMPLING, (-w) % DOWNSAMPLING
        if ph or pw:
            # pad symmetrically to a multiple of 16, crop back after the decoder
            x = F.pad(x, (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2), mode="replicate")
        x1 = self.inc(x)
        x2 = self.down1(x1)
        x3 = self.down2(x2)
        x4 = self.down3(x3)
        x5 = self.down4(x4)
        y = self.up1(x5, x4)
        y = self.up2(y, x3)
        y = self.up3(y, x2)
        y = self.up4(y, x1)
        y = self.classifier(y)
        if ph or pw:
            y = y[..., ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
        return y
