"""Frozen multi-scale feature extraction followed by a trainable projection.

Stage features are bilinearly resized to the working grid and concatenated
shallow -> deep before a bare linear map to ``d`` channels.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F


class ToyBackbone(nn.Module):
    """Small 3-stage conv net, randomly initialised from a seed and frozen."""

    def __init__(self, channels=(16, 32, 64), seed=0, zero_bias=False):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + tuple(channels)
        self.stages = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (9 * cin)) ** 0.5)
                if zero_bias:
                    conv.bias.zero_()
                else:
                    conv.bias.copy_(torch.randn(cout, generator=gen) * 0.01)
            self.stages.append(conv)
        self.out_channels = tuple(channels)
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        for conv in self.stages:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class ResNetBackbone(nn.Module):
    """Adapter around a torchvision ResNet-50; returns layer2..layer4 outputs."""

    def __init__(self, weights_path=None):
        super().__init__()
        import torchvision

        net = torchvision.models.resnet50(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1)
        self.layer2, self.layer3, self.layer4 = net.layer2, net.layer3, net.layer4
        self.out_channels = (512, 1024, 2048)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # batch-norm statistics stay frozen
        return super().train(False)

    def forward(self, x):
        x = self.stem((x - self.mean) / self.std)
        f2 = self.layer2(x)
        f3 = self.layer3(f2)
        f4 = self.layer4(f3)
        return [f2, f3, f4]


class FeatureExtractor(nn.Module):
    """image (B, 3, H, W) -> feature map (B, d, h, w)."""

    def __init__(self, net, grid=64, d=256, min_size=None):
        super().__init__()
        self.net = net
        self.grid = grid
        self.d = d
        self.min_size = min_size if min_size is not None else grid
        self.proj = nn.Conv2d(sum(net.out_channels), d, 1)

    def backbone_features(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) image batch, got {tuple(image.shape)}")
        H, W = image.shape[-2:]
        if H != W or H < self.min_size:
            raise ValueError(f"image must be square and at least {self.min_size}px, got {H}x{W}")
        with torch.no_grad():
            feats = self.net(image)
            feats = [F.interpolate(f, size=(self.grid, self.grid), mode="bilinear", align_corners=False) for f in feats]
            return torch.cat(feats, dim=1)

    def forward(self, image):
        return self.proj(self.backbone_features(image))

    def stride(self, image_size):
        return image_size / self.grid
