"""Focal loss, the combined real+virtual training objective, and a
finite-difference gradient checker for the whole stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import LossConfig, ModelConfig
from .data import MODALITIES, Modality
from .errors import InvalidParameter, NonFiniteInput, ShapeMismatch
from .network import BtdNet, random_scan_batch


@dataclass
class FocalParams:
    """alpha balances positive/negative examples; gamma down-weights easy ones."""

    alpha: float = 0.25
    gamma: float = 2.0
    literal_both_terms: bool = False
    reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidParameter(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0.0:
            raise InvalidParameter(f"gamma must be >= 0, got {self.gamma}")
        if self.reduction not in ("sum", "mean"):
            raise InvalidParameter(f"reduction must be 'sum' or 'mean', got {self.reduction}")

    @classmethod
    def from_config(cls, cfg: LossConfig) -> "FocalParams":
        return cls(cfg.alpha, cfg.gamma, cfg.literal_eq2, cfg.reduction)


def focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, params: FocalParams
) -> torch.Tensor:
    """Batch focal loss over 2-class logits and one-hot targets.

    p is the softmax probability of the positive class (index 1). Positive
    samples contribute -alpha*(1-p)^gamma*log(p), negative samples
    -(1-alpha)*p^gamma*log(1-p). Everything runs through log-sigmoid so
    saturated logits stay finite. With ``literal_both_terms`` both terms apply
    to every sample regardless of its label.
    """
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape != targets.shape:
        raise ShapeMismatch(
            f"expected matching (batch, 2) logits/targets, got {tuple(logits.shape)} "
            f"and {tuple(targets.shape)}"
        )
    if not bool(torch.isfinite(logits).all()) or not bool(torch.isfinite(targets).all()):
        raise NonFiniteInput("focal loss received NaN/inf")
    d = logits[:, 1] - logits[:, 0]
    log_p = F.logsigmoid(d)
    log_q = F.logsigmoid(-d)
    # (1-p)^gamma and p^gamma computed in log space (exact 1.0 at gamma=0)
    pos = -params.alpha * torch.exp(params.gamma * log_q) * log_p
    neg = -(1.0 - params.alpha) * torch.exp(params.gamma * log_p) * log_q
    if params.literal_both_terms:
        per_sample = pos + neg
    else:
        per_sample = targets[:, 1] * pos + targets[:, 0] * neg
    return per_sample.sum() if params.reduction == "sum" else per_sample.mean()


def total_loss(
    logits_v: torch.Tensor,
    logits_ri: torch.Tensor,
    logits_rj: torch.Tensor,
    y_i: torch.Tensor,
    y_j: torch.Tensor,
    lam: float,
    params: FocalParams,
) -> torch.Tensor:
    """Virtual + both real focal terms for one MixAugment batch.

    The virtual volume's soft label enters as the convex combination
    lam*FL(logits_v, y_i) + (1-lam)*FL(logits_v, y_j), which equals applying
    the per-sample focal terms to the mixed label directly.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidParameter(f"lambda must lie in [0, 1], got {lam}")
    virtual = lam * focal_loss(logits_v, y_i, params) + (1.0 - lam) * focal_loss(
        logits_v, y_j, params
    )
    return virtual + focal_loss(logits_ri, y_i, params) + focal_loss(logits_rj, y_j, params)


@dataclass
class GradCheckBatch:
    """Fixed batch for the finite-difference check (real + virtual tensors)."""

    pixels: dict[Modality, torch.Tensor]
    lengths: dict[Modality, torch.Tensor]
    pixels_v: dict[Modality, torch.Tensor]
    lengths_v: dict[Modality, torch.Tensor]
    y_i: torch.Tensor
    y_j: torch.Tensor
    perm: list[int]
    lam: float


def make_gradcheck_batch(
    config: ModelConfig,
    batch_size: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float64,
) -> GradCheckBatch:
    pixels, lengths = random_scan_batch(config, batch_size, rng, dtype)
    perm = [(i + 1) % batch_size for i in range(batch_size)]
    lam = float(rng.uniform(0.2, 0.8))
    pixels_v = {}
    lengths_v = {}
    for m in MODALITIES:
        pixels_v[m] = lam * pixels[m] + (1.0 - lam) * pixels[m][perm]
        lengths_v[m] = torch.maximum(lengths[m], lengths[m][perm])
    labels = rng.integers(0, 2, size=batch_size)
    y_i = torch.stack(
        [torch.tensor([1.0 - l, float(l)], dtype=dtype) for l in labels]
    )
    y_j = y_i[perm]
    return GradCheckBatch(pixels, lengths, pixels_v, lengths_v, y_i, y_j, perm, lam)


def _batch_loss(model: BtdNet, batch: GradCheckBatch, params: FocalParams) -> torch.Tensor:
    logits_r = model(batch.pixels, batch.lengths)
    logits_v = model(batch.pixels_v, batch.lengths_v)
    return total_loss(
        logits_v, logits_r, logits_r[batch.perm], batch.y_i, batch.y_j, batch.lam, params
    )


def loss_gradient_check(
    model: BtdNet,
    batch: GradCheckBatch,
    params: FocalParams,
    num_params: int = 120,
    step: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Compare analytic gradients of the total objective against central
    finite differences on randomly chosen parameter entries.

    Relative error uses a 1e-6 floor in the denominator so true zeros are not
    compared against finite-difference noise. Returns the max relative error,
    the entries checked, and the worst offenders.
    """
    model.train()
    for p in model.parameters():
        p.grad = None
    loss = _batch_loss(model, batch, params)
    loss.backward()

    named = [(n, p) for n, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(num_params, total), replace=False)
    bounds = np.cumsum(sizes)

    results = []
    with torch.no_grad():
        for flat_idx in chosen:
            pi = int(np.searchsorted(bounds, flat_idx, side="right"))
            local = int(flat_idx - (bounds[pi - 1] if pi > 0 else 0))
            name, p = named[pi]
            analytic = float(p.grad.reshape(-1)[local])
            view = p.data.reshape(-1)
            orig = float(view[local])
            view[local] = orig + step
            up = float(_batch_loss(model, batch, params))
            view[local] = orig - step
            down = float(_batch_loss(model, batch, params))
            view[local] = orig
            numeric = (up - down) / (2.0 * step)
            denom = max(abs(analytic), abs(numeric), 1e-6)
            results.append((abs(analytic - numeric) / denom, name, local, analytic, numeric))
    results.sort(reverse=True)
    return {
        "max_rel_err": results[0][0] if results else 0.0,
        "n_checked": len(results),
        "worst": [
            {"param": n, "index": i, "analytic": a, "numeric": m, "rel_err": e}
            for e, n, i, a, m in results[:5]
        ],
    }
