"""SGD with momentum and L2 weight decay, plus the step-drop LR schedule."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import MissingGradient


@dataclass
class SgdConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    drop_factor: float = 5.0
    drop_epochs: tuple = (240, 480, 640, 800, 1000)

    def __post_init__(self):
        self.drop_epochs = tuple(int(e) for e in self.drop_epochs)
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.drop_factor <= 1:
            raise ValueError("drop_factor must exceed 1")
        if any(b <= a for a, b in zip(self.drop_epochs, self.drop_epochs[1:])):
            raise ValueError("drop_epochs must be strictly increasing")


def lr_at_epoch(cfg: SgdConfig, epoch: int) -> float:
    """Learning rate for zero-based ``epoch``: one drop per boundary reached."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = sum(1 for e in cfg.drop_epochs if e <= epoch)
    return cfg.base_lr / cfg.drop_factor ** drops


def sgd_step(params, cfg: SgdConfig, lr: float):
    """One in-place update; gradients are cleared afterwards.

    ``g' = g + wd * w``, ``v = momentum * v + g'``, ``w -= lr * v``.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise MissingGradient(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.grad + cfg.weight_decay * p.data if cfg.weight_decay else p.grad
        p.momentum = cfg.momentum * p.momentum + g
        p.data = p.data - lr * p.momentum
        p.grad = None
    return params

