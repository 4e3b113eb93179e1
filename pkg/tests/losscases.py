"""Gradient-descent pull used by the loss and acceptance suites."""
import math

import torch

from emdfnet.geometry import aligned_iou_torch
from emdfnet.losses import siou_terms


def gradient_pull(n=100, steps=2000, seed=0):
    """Descend the SIoU loss from random starts; returns final IoUs."""
    g = torch.Generator().manual_seed(seed)
    gc = torch.rand(n, 2, generator=g, dtype=torch.float64) * 100
    gwh = 5 + torch.rand(n, 2, generator=g, dtype=torch.float64) * 45
    gt = torch.cat([gc - gwh / 2, gc + gwh / 2], 1)
    ctr = (gc + (torch.rand(n, 2, generator=g, dtype=torch.float64) - 0.5) * 120).requires_grad_()
    log_wh = (5 + torch.rand(n, 2, generator=g, dtype=torch.float64) * 45).log().requires_grad_()
    lrs = (100.0, 0.02)
    opt = torch.optim.SGD([{"params": [ctr], "lr": lrs[0]}, {"params": [log_wh], "lr": lrs[1]}])

    def boxes():
        return torch.cat([ctr - log_wh.exp() / 2, ctr + log_wh.exp() / 2], 1)

    for step in range(steps):
        f = 0.5 * (1 + math.cos(math.pi * step / steps))
        for group, lr in zip(opt.param_groups, lrs):
            group["lr"] = lr * f
        opt.zero_grad()
        siou_terms(boxes(), gt)[0].sum().backward()
        opt.step()
    with torch.no_grad():
        return aligned_iou_torch(boxes(), gt)
