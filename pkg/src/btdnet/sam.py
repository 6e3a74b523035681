"""Sharpness-aware minimization on top of SGD with momentum.

Two-step update: perturb parameters along the normalized gradient direction
(theta' = theta + rho * g / ||g||_2, global norm), re-evaluate the gradient
there, restore the parameters and let the base SGD apply the perturbed-point
gradient. With rho = 0 (or a zero gradient) the perturbation is skipped and
the update is plain SGD+momentum, bit for bit.
"""

from __future__ import annotations

import torch
from torch.nn.modules.batchnorm import _BatchNorm

from .errors import InvalidParameter


def disable_running_stats(model: torch.nn.Module) -> None:
    def _disable(module):
        if isinstance(module, _BatchNorm):
            module.backup_momentum = module.momentum
            module.momentum = 0
    model.apply(_disable)


def enable_running_stats(model: torch.nn.Module) -> None:
    def _enable(module):
        if isinstance(module, _BatchNorm) and hasattr(module, "backup_momentum"):
            module.momentum = module.backup_momentum
    model.apply(_enable)


class SamSGD(torch.optim.Optimizer):
    """SGD+momentum wrapped with the sharpness-aware perturbation."""

    def __init__(self, params, lr: float, momentum: float = 0.9, rho: float = 0.05):
        if rho < 0:
            raise InvalidParameter(f"rho must be >= 0, got {rho}")
        if lr <= 0:
            raise InvalidParameter(f"lr must be positive, got {lr}")
        defaults = dict(lr=lr, momentum=momentum, rho=rho)
        super().__init__(params, defaults)
        self.base = torch.optim.SGD(self.param_groups, lr=lr, momentum=momentum)
        self.param_groups = self.base.param_groups
        self._perturbed = False

    @property
    def perturbed(self) -> bool:
        return self._perturbed

    def _grad_norm(self) -> torch.Tensor:
        grads = [
            p.grad.norm(p=2)
            for group in self.param_groups
            for p in group["params"]
            if p.grad is not None
        ]
        if not grads:
            return torch.tensor(0.0)
        return torch.norm(torch.stack(grads), p=2)

    @torch.no_grad()
    def first_step(self) -> None:
        """Climb to theta + rho * g / ||g||; a zero rho or zero gradient skips
        the climb so the following step is exactly plain SGD+momentum."""
        self._perturbed = False
        rho = self.param_groups[0]["rho"]
        if rho == 0:
            return
        norm = self._grad_norm()
        if float(norm) == 0.0:
            return
        scale = rho / norm
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                e_w = p.grad * scale
                p.add_(e_w)
                self.state[p]["e_w"] = e_w
        self._perturbed = True

    @torch.no_grad()
    def second_step(self) -> None:
        """Restore the original parameters and apply the base update."""
        if self._perturbed:
            for group in self.param_groups:
                for p in group["params"]:
                    if "e_w" in self.state[p]:
                        p.sub_(self.state[p]["e_w"])
                        del self.state[p]["e_w"]
            self._perturbed = False
        self.base.step()

    def step(self, closure=None):  # pragma: no cover - use sam_step
        raise RuntimeError("use sam_step(model, closure, optimizer)")


def sam_step(model: torch.nn.Module, closure, optimizer: SamSGD) -> torch.Tensor:
    """One full sharpness-aware update.

    ``closure`` must zero grads, compute the loss, call backward and return
    the loss; it runs a second time at the perturbed point (with batch-norm
    running-stat updates suppressed so statistics are collected once per
    batch). Returns the first-pass loss for logging.
    """
    loss = closure().detach()
    optimizer.first_step()
    if optimizer.perturbed:
        disable_running_stats(model)
        try:
            closure()
        finally:
            enable_running_stats(model)
    optimizer.second_step()
    return loss
