import torch.nn as nn

BN_EPS = 1e-5


class ConvNormAct(nn.Module):
    def __init__(self, c_in, c_out, k=3, s=1, d=1, groups=1, act=True):
        super().__init__()
        pad = d * (k - 1) // 2
        self.conv = nn.Conv2d(c_in, c_out, k, s, pad, dilation=d, groups=groups, bias=False)
        self.norm = nn.BatchNorm2d(c_out, eps=BN_EPS)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
