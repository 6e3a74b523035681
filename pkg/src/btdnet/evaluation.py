"""Macro-F1 metric, TTA inference with logit summation, and fold aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .augment import tta_versions
from .config import Config
from .data import MODALITIES, PAD_VALUE, Modality, ScanArrayCache, pad_scan
from .errors import EmptyFold, EmptyInput, ShapeMismatch, VolumeTooLong
from .network import BtdNet, StreamModel, forward_scan

EVAL_BATCH = 8


def macro_f1(pred_labels, true_labels) -> float:
    """Unweighted mean of the two per-class F1 scores.

    A class with precision+recall = 0 contributes F1 = 0.
    """
    preds = list(pred_labels)
    trues = list(true_labels)
    if len(preds) != len(trues):
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(trues)} labels")
    if not preds:
        raise EmptyInput("macro_f1 needs at least one sample")
    f1s = []
    for cls in (0, 1):
        tp = sum(1 for p, t in zip(preds, trues) if p == cls and t == cls)
        fp = sum(1 for p, t in zip(preds, trues) if p == cls and t != cls)
        fn = sum(1 for p, t in zip(preds, trues) if p != cls and t == cls)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return (f1s[0] + f1s[1]) / 2.0


@dataclass
class FoldReport:
    scores: list[float]
    mean: float
    spread: float


def aggregate_folds(scores) -> FoldReport:
    """Mean and spread (max - min) across fold scores."""
    scores = [float(s) for s in scores]
    if not scores:
        raise EmptyInput("no fold scores to aggregate")
    return FoldReport(scores, sum(scores) / len(scores), max(scores) - min(scores))


def _tta_logits(
    model: BtdNet,
    scan,
    rng: np.random.Generator,
    rotation_deg: float,
    force_identity: bool = False,
) -> np.ndarray:
    versions = tta_versions(scan, rng, rotation_deg, force_identity)
    # float64 accumulation keeps the sum of four float32 logit vectors exact
    return np.stack([forward_scan(model, v)[0] for v in versions]).astype(np.float64)


def tta_predict(
    model: BtdNet,
    scan,
    rng: np.random.Generator,
    rotation_deg: float = 15.0,
    force_identity: bool = False,
) -> tuple[np.ndarray, int]:
    """Sum the logits of the four TTA versions; label is the argmax.

    Equal logits resolve to class 0 (argmax takes the first maximum).
    """
    per_version = _tta_logits(model, scan, rng, rotation_deg, force_identity)
    p_final = per_version.sum(axis=0)
    return p_final, int(np.argmax(p_final))


def _stack_volume(arr: np.ndarray, t: int, strict: bool) -> tuple[np.ndarray, int]:
    """(l, H, W) float stack -> (t, 1, H, W) padded with PAD_VALUE."""
    l = arr.shape[0]
    if l > t:
        if strict:
            raise VolumeTooLong(f"{l} slices > t={t}")
        start = (l - t) // 2
        arr = arr[start : start + t]
        l = t
    out = np.full((t, 1) + arr.shape[1:], PAD_VALUE, dtype=np.float32)
    out[:l, 0] = arr
    return out, l


def predict_logits(
    model,
    cache: ScanArrayCache,
    ids: list[str],
    config: Config,
    modality: Modality | None = None,
) -> np.ndarray:
    """Batched eval-mode logits without augmentation.

    ``modality`` selects the single-stream path for a StreamModel; otherwise
    the full multimodal forward runs.
    """
    model.eval()
    t_map = config.model.t
    strict = config.train.strict_length
    outs = []
    with torch.no_grad():
        for start in range(0, len(ids), EVAL_BATCH):
            chunk = ids[start : start + EVAL_BATCH]
            if modality is not None:
                stacks, lens = [], []
                for sid in chunk:
                    x, l = _stack_volume(cache.volume(sid, modality), t_map[modality], strict)
                    stacks.append(x)
                    lens.append(l)
                x = torch.from_numpy(np.stack(stacks))
                logits = model(x, torch.tensor(lens, dtype=torch.long))
            else:
                pixels = {}
                lengths = {}
                for m in MODALITIES:
                    stacks, lens = [], []
                    for sid in chunk:
                        x, l = _stack_volume(cache.volume(sid, m), t_map[m], strict)
                        stacks.append(x)
                        lens.append(l)
                    pixels[m] = torch.from_numpy(np.stack(stacks))
                    lengths[m] = torch.tensor(lens, dtype=torch.long)
                logits = model(pixels, lengths)
            outs.append(logits.numpy())
    return np.concatenate(outs)


def evaluate_fold(
    model,
    cache: ScanArrayCache,
    val_ids: list[str],
    config: Config,
    use_tta: bool = False,
    modality: Modality | None = None,
    dump_path: str | Path | None = None,
) -> float:
    """Macro-F1 of a frozen model over one validation fold.

    With ``use_tta`` each scan is predicted from the summed logits of its four
    TTA versions (the rotation angle is one fixed draw per scan from
    ``augment.tta_seed``, so the whole evaluation is reproducible). Every
    prediction can be dumped as JSON lines for auditing.
    """
    if not val_ids:
        raise EmptyFold("validation fold is empty")
    records = []
    preds = []
    trues = [cache.label(sid) for sid in val_ids]
    if use_tta:
        if modality is not None:
            raise ShapeMismatch("TTA evaluation runs on the full multimodal model")
        model.eval()
        for sid in val_ids:
            scan = pad_scan(cache.scan(sid), config.model.t, config.train.strict_length)
            rng = np.random.default_rng(config.augment.tta_seed)
            per_version = _tta_logits(model, scan, rng, config.augment.rotation_deg)
            p_final = per_version.sum(axis=0)
            label = int(np.argmax(p_final))
            preds.append(label)
            records.append(
                {
                    "scan_id": sid,
                    "versions": per_version.tolist(),
                    "p_final": p_final.tolist(),
                    "label": label,
                    "truth": int(cache.label(sid)),
                }
            )
    else:
        logits = predict_logits(model, cache, val_ids, config, modality)
        for sid, row in zip(val_ids, logits):
            label = int(np.argmax(row))
            preds.append(label)
            records.append(
                {
                    "scan_id": sid,
                    "versions": [row.tolist()],
                    "p_final": row.tolist(),
                    "label": label,
                    "truth": int(cache.label(sid)),
                }
            )
    if dump_path is not None:
        Path(dump_path).parent.mkdir(parents=True, exist_ok=True)
        with open(dump_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec) + "\n")
    return macro_f1(preds, trues)


def write_eval_report(
    path: str | Path, per_fold: list[float], digest: str, tta_seed: int
) -> FoldReport:
    report = aggregate_folds(per_fold)
    payload = {
        "per_fold": report.scores,
        "mean": report.mean,
        "spread": report.spread,
        "config_digest": digest,
        "tta_seed": tta_seed,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=1))
    return report
