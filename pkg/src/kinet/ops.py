"""Shared differentiable helpers.

``relu`` routes through a module-level monitor so the gradient checker can
measure how far every rectifier input sits from the kink at zero.
"""

import contextlib

import torch

_monitors = []


def relu(x):
    if _monitors:
        margin = x.detach().abs().min().item() if x.numel() else float("inf")
        for m in _monitors:
            m.observe(margin)
    return torch.relu(x)


class KinkMonitor:
    def __init__(self):
        self.min_margin = float("inf")
        self.calls = 0

    def observe(self, margin):
        self.calls += 1
        self.min_margin = min(self.min_margin, margin)


@contextlib.contextmanager
def watch_kinks():
    """Record the smallest |input| seen by any ``relu`` inside the block."""
    monitor = KinkMonitor()
    _monitors.append(monitor)
    try:
        yield monitor
    finally:
        _monitors.remove(monitor)
