"""Two-phase trainer: independent per-modality streams, then the fused model
end-to-end; stratified k-fold orchestration, JSONL logging and checkpoints.
"""

from __future__ import annotations

import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .augment import apply_transform, sample_lambda, sample_transform
from .config import Config, config_digest
from .data import MODALITIES, Modality, ScanArrayCache, load_manifest
from .errors import EmptyFold, InsufficientClass, InvalidParameter, VolumeTooLong
from .evaluation import aggregate_folds, evaluate_fold
from .network import BtdNet, StreamModel, apply_state, load_checkpoint, save_checkpoint
from .objective import FocalParams, total_loss
from .sam import SamSGD, sam_step

logger = logging.getLogger(__name__)


@dataclass
class FoldSplit:
    """k disjoint validation folds (index lists) partitioning the dataset."""

    folds: list[list[int]]

    def val_indices(self, fold: int) -> list[int]:
        return self.folds[fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for f, idxs in enumerate(self.folds) if f != fold for i in idxs]


def stratified_kfold(labels, k: int, seed: int) -> FoldSplit:
    """Shuffle each class independently and deal it round-robin, so per-fold
    class counts deviate from exact proportionality by at most one."""
    if k < 2:
        raise InvalidParameter(f"need k >= 2 folds, got {k}")
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, label in enumerate(labels):
        by_class[int(label)].append(i)
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in sorted(by_class):
        idx = np.array(by_class[cls])
        if len(idx) < k:
            raise InsufficientClass(f"class {cls} has {len(idx)} members, fewer than k={k}")
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    return FoldSplit([sorted(f) for f in folds])


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class TrainBatch:
    pixels: dict[Modality, torch.Tensor] | torch.Tensor
    lengths: dict[Modality, torch.Tensor] | torch.Tensor
    targets: torch.Tensor
    perm: list[int]
    lam: float
    pixels_v: dict[Modality, torch.Tensor] | torch.Tensor
    lengths_v: dict[Modality, torch.Tensor] | torch.Tensor
    # across-dataset pairing only: the partner batch (j-examples); when None
    # the j-examples are the batch itself reordered by ``perm``
    pixels_j: dict[Modality, torch.Tensor] | torch.Tensor | None = None
    lengths_j: dict[Modality, torch.Tensor] | torch.Tensor | None = None
    targets_j: torch.Tensor | None = None


def _derangement(n: int, rng: np.random.Generator) -> list[int]:
    """Random single-cycle pairing, so no sample mixes with itself."""
    order = rng.permutation(n)
    perm = [0] * n
    for pos in range(n):
        perm[order[pos]] = int(order[(pos + 1) % n])
    return perm


def _draw_partner(pool_ids: list[str], own: str, rng: np.random.Generator) -> str:
    while True:
        pick = pool_ids[int(rng.integers(len(pool_ids)))]
        if pick != own:
            return pick


class _BufferPool:
    """Reusable per-shape batch buffers; avoids re-mapping ~50 MB arrays on
    every step. Buffers are only valid until the next take() with the same
    key, which matches the strictly sequential training loop."""

    def __init__(self):
        self._np: dict = {}
        self._torch: dict = {}

    def np_filled(self, key: str, shape: tuple, fill: float) -> np.ndarray:
        buf = self._np.get(key)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape, dtype=np.float32)
            self._np[key] = buf
        buf.fill(fill)
        return buf

    def torch_empty(self, key: str, shape: tuple) -> torch.Tensor:
        buf = self._torch.get(key)
        if buf is None or tuple(buf.shape) != shape:
            buf = torch.empty(shape, dtype=torch.float32)
            self._torch[key] = buf
        return buf


def _fill_sample(
    dst: np.ndarray,
    cache: ScanArrayCache,
    scan_id: str,
    modality: Modality,
    strict: bool,
    rng: np.random.Generator,
    config: Config,
) -> int:
    """Write one scan's transformed, padded volume into dst (t, 1, H, W)."""
    t = dst.shape[0]
    arr = cache.volume(scan_id, modality)
    l = arr.shape[0]
    if l > t:
        if strict:
            raise VolumeTooLong(f"{scan_id}/{modality.value}: {l} slices > t={t}")
        start = (l - t) // 2
        arr = arr[start : start + t]
        l = t
    for i in range(l):
        spec = sample_transform(rng, config.augment.rotation_deg, config.augment.hflip_prob)
        dst[i, 0] = apply_transform(arr[i], spec)
    np.clip(dst[:l], -1.0, 1.0, out=dst[:l])
    return l


def _one_hot_targets(cache: ScanArrayCache, ids: list[str]) -> torch.Tensor:
    return torch.stack(
        [
            torch.tensor([1.0 - cache.label(s), float(cache.label(s))], dtype=torch.float32)
            for s in ids
        ]
    )


def build_train_batch(
    cache: ScanArrayCache,
    ids: list[str],
    config: Config,
    rng: np.random.Generator,
    modality: Modality | None = None,
    pool: _BufferPool | None = None,
    partner_ids: list[str] | None = None,
) -> TrainBatch:
    """Assemble one MixAugment batch.

    Every volume gets per-slice transforms, then each sample is convexly mixed
    (one shared lambda) with a partner: by default another batch member chosen
    by a derangement, or, when ``partner_ids`` is given, an independently
    transformed scan drawn from the wider training set.
    """
    b = len(ids)
    pool = pool if pool is not None else _BufferPool()
    targets = _one_hot_targets(cache, ids)
    strict = config.train.strict_length
    mods = [modality] if modality is not None else list(MODALITIES)

    def _stacks(tag: str, id_list: list[str]):
        px: dict[Modality, torch.Tensor] = {}
        ln: dict[Modality, torch.Tensor] = {}
        for m in mods:
            t = config.model.t[m]
            buf = pool.np_filled(f"{tag}/{m.value}", (b, t, 1, 224, 224), -1.0)
            lens = [
                _fill_sample(buf[i], cache, sid, m, strict, rng, config)
                for i, sid in enumerate(id_list)
            ]
            px[m] = torch.from_numpy(buf)
            ln[m] = torch.tensor(lens, dtype=torch.long)
        return px, ln

    pixels, lengths = _stacks("real", ids)
    lam = sample_lambda(config.augment.mix_alpha, rng)
    if partner_ids is not None:
        pixels_j, lengths_j = _stacks("partner", partner_ids)
        targets_j = _one_hot_targets(cache, partner_ids)
        perm = list(range(b))
    else:
        pixels_j, lengths_j, targets_j = None, None, None
        perm = _derangement(b, rng)

    pixels_v: dict[Modality, torch.Tensor] = {}
    lengths_v: dict[Modality, torch.Tensor] = {}
    for m in mods:
        x = pixels[m]
        other = pixels_j[m] if pixels_j is not None else x
        other_len = lengths_j[m] if lengths_j is not None else lengths[m]
        v = pool.torch_empty(f"virt/{m.value}", tuple(x.shape))
        torch.mul(x, lam, out=v)
        for i in range(b):
            v[i].add_(other[perm[i]], alpha=1.0 - lam)
        pixels_v[m] = v
        lengths_v[m] = torch.maximum(lengths[m], other_len[perm])
    if modality is not None:
        return TrainBatch(
            pixels[modality],
            lengths[modality],
            targets,
            perm,
            lam,
            pixels_v[modality],
            lengths_v[modality],
            pixels_j[modality] if pixels_j is not None else None,
            lengths_j[modality] if lengths_j is not None else None,
            targets_j,
        )
    return TrainBatch(
        pixels, lengths, targets, perm, lam, pixels_v, lengths_v,
        pixels_j, lengths_j, targets_j,
    )


def _snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _restore(model: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    model.load_state_dict(state)


class _JsonlLog:
    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, **record) -> None:
        record.setdefault("timestamp", time.strftime("%Y-%m-%dT%H:%M:%S"))
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _train_model(
    model: torch.nn.Module,
    cache: ScanArrayCache,
    train_ids: list[str],
    val_ids: list[str],
    config: Config,
    lr: float,
    epochs: int,
    phase: int,
    fold: int,
    modality: Modality | None,
    batch_rng: np.random.Generator,
    log: _JsonlLog | None,
) -> tuple[dict[str, torch.Tensor], float, list[float]]:
    """Shared epoch loop; returns (best state, best val F1, epoch losses)."""
    if not train_ids:
        raise EmptyFold(f"fold {fold}: empty training set")
    if not val_ids:
        raise EmptyFold(f"fold {fold}: empty validation set")
    tcfg = config.train
    optimizer = SamSGD(model.parameters(), lr=lr, momentum=tcfg.momentum, rho=tcfg.sam_rho)
    params = FocalParams.from_config(config.loss)
    pool = _BufferPool()
    best_state = _snapshot(model)
    best_f1 = float("-inf")
    best_epoch = 0
    epoch_losses: list[float] = []
    for epoch in range(1, epochs + 1):
        model.train()
        order = [train_ids[i] for i in batch_rng.permutation(len(train_ids))]
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            ids = order[start : start + tcfg.batch_size]
            if len(ids) < 2:
                continue  # mixing needs a pair
            partner_ids = None
            if not tcfg.mix_within_batch:
                partner_ids = [
                    _draw_partner(train_ids, sid, batch_rng) for sid in ids
                ]
            batch = build_train_batch(
                cache, ids, config, batch_rng, modality, pool, partner_ids
            )

            def closure():
                optimizer.zero_grad()
                logits_r = model(batch.pixels, batch.lengths)
                logits_v = model(batch.pixels_v, batch.lengths_v)
                if batch.pixels_j is not None:
                    logits_rj = model(batch.pixels_j, batch.lengths_j)
                    y_j = batch.targets_j
                else:
                    logits_rj = logits_r[batch.perm]
                    y_j = batch.targets[batch.perm]
                loss = total_loss(
                    logits_v,
                    logits_r,
                    logits_rj,
                    batch.targets,
                    y_j,
                    batch.lam,
                    params,
                )
                loss.backward()
                return loss

            losses.append(float(sam_step(model, closure, optimizer)))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        epoch_losses.append(train_loss)
        val_f1 = evaluate_fold(model, cache, val_ids, config, use_tta=False, modality=modality)
        if log is not None:
            log.write(
                epoch=epoch,
                phase=phase,
                fold=fold,
                modality=modality.value if modality else None,
                train_loss=train_loss,
                val_f1=val_f1,
                lr=lr,
            )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_state = _snapshot(model)
            best_epoch = epoch
        elif epoch - best_epoch >= tcfg.patience:
            logger.info("fold %d phase %d: early stop at epoch %d", fold, phase, epoch)
            break
    return best_state, (best_f1 if best_f1 > float("-inf") else float("nan")), epoch_losses


def train_phase1(
    modality: Modality,
    fold: int,
    train_ids: list[str],
    val_ids: list[str],
    cache: ScanArrayCache,
    config: Config,
    out_dir: str | Path,
    log: _JsonlLog | None = None,
) -> Path:
    """Train one modality stream with its temporary head; saves the
    best-validation-F1 checkpoint and returns its path."""
    out_dir = Path(out_dir)
    mod_index = MODALITIES.index(modality)
    torch.manual_seed(_derived_seed(config.train.seed, fold, 1, mod_index))
    model = StreamModel(config.model, modality)
    batch_rng = np.random.default_rng(_derived_seed(config.train.seed, fold, 1, mod_index, 1))
    best_state, best_f1, _ = _train_model(
        model,
        cache,
        train_ids,
        val_ids,
        config,
        config.train.lr_phase1,
        config.train.epochs_phase1,
        1,
        fold,
        modality,
        batch_rng,
        log,
    )
    _restore(model, best_state)
    path = out_dir / "ckpt" / f"fold{fold}" / f"phase1_{modality.value}_best.bin"
    meta = {
        "phase": 1,
        "fold": fold,
        "modality": modality.value,
        "val_f1": None if np.isnan(best_f1) else best_f1,
    }
    return save_checkpoint(path, model, meta)


def init_phase2_model(
    config: Config, stream_ckpts: dict[Modality, Path] | None
) -> BtdNet:
    """Fresh fusion layers; shared CNN/RNN and per-group routing loaded from
    the best phase-1 stream (overall / within each group)."""
    model = BtdNet(config.model)
    if config.train.phase2_init != "best" or not stream_ckpts:
        return model
    payloads = {m: load_checkpoint(p) for m, p in stream_ckpts.items()}

    def f1_of(m: Modality) -> float:
        v = payloads[m].meta.get("val_f1")
        return -1.0 if v is None else float(v)

    best_overall = max(payloads, key=f1_of)
    apply_state(model, payloads[best_overall].state, prefix="backbone.")
    apply_state(model, payloads[best_overall].state, prefix="rnn.")
    for name, (mods, _) in model.groups.items():
        have = [m for m in mods if m in payloads]
        if not have:
            continue
        best_in_group = max(have, key=f1_of)
        apply_state(model, payloads[best_in_group].state, prefix=f"routing.{name}.")
    return model


def train_phase2(
    fold: int,
    train_ids: list[str],
    val_ids: list[str],
    cache: ScanArrayCache,
    config: Config,
    stream_ckpts: dict[Modality, Path] | None,
    out_dir: str | Path,
    log: _JsonlLog | None = None,
) -> tuple[Path, float]:
    """End-to-end training of the fused model; nothing stays frozen."""
    out_dir = Path(out_dir)
    torch.manual_seed(_derived_seed(config.train.seed, fold, 2))
    model = init_phase2_model(config, stream_ckpts)
    batch_rng = np.random.default_rng(_derived_seed(config.train.seed, fold, 2, 1))
    best_state, best_f1, _ = _train_model(
        model,
        cache,
        train_ids,
        val_ids,
        config,
        config.train.lr_phase2,
        config.train.epochs_phase2,
        2,
        fold,
        None,
        batch_rng,
        log,
    )
    _restore(model, best_state)
    path = out_dir / "ckpt" / f"fold{fold}" / "phase2_best.bin"
    meta = {"phase": 2, "fold": fold, "val_f1": None if np.isnan(best_f1) else best_f1}
    save_checkpoint(path, model, meta)
    return path, best_f1


def write_run_meta(out_dir: Path, config: Config) -> None:
    meta = {
        "config": config.to_dict(),
        "config_digest": config_digest(config),
        "seed": config.train.seed,
        "code_version": __version__,
        "torch_version": torch.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=1))


def run_cross_validation(
    prep_root: str | Path,
    config: Config,
    out_dir: str | Path,
    folds: list[int] | None = None,
) -> dict:
    """Full two-phase, k-fold pipeline over a preprocessed dataset.

    Writes run metadata, a JSONL training log, all checkpoints and a
    ``fold_summary.json``; returns the summary dict.
    """
    out_dir = Path(out_dir)
    write_run_meta(out_dir, config)
    log_path = out_dir / "training_log.jsonl"
    if log_path.exists():
        log_path.unlink()  # a run owns its directory; start the log fresh
    log = _JsonlLog(log_path)
    manifest = load_manifest(prep_root)
    cache = ScanArrayCache(prep_root, manifest)
    ids = manifest.scan_ids()
    split = stratified_kfold(manifest.labels(), config.train.folds, config.train.seed)
    wanted = folds if folds is not None else list(range(config.train.folds))
    summary: dict = {"folds": []}
    for fold in wanted:
        val_ids = [ids[i] for i in split.val_indices(fold)]
        train_ids = [ids[i] for i in split.train_indices(fold)]
        stream_ckpts: dict[Modality, Path] = {}
        phase1_f1: dict[str, float] = {}
        for modality in MODALITIES:
            ckpt = train_phase1(
                modality, fold, train_ids, val_ids, cache, config, out_dir, log
            )
            stream_ckpts[modality] = ckpt
            meta_f1 = load_checkpoint(ckpt).meta.get("val_f1")
            phase1_f1[modality.value] = float("nan") if meta_f1 is None else float(meta_f1)
        ckpt2, f1_2 = train_phase2(
            fold, train_ids, val_ids, cache, config, stream_ckpts, out_dir, log
        )
        summary["folds"].append(
            {
                "fold": fold,
                "phase1_f1": phase1_f1,
                "phase2_f1": f1_2,
                "phase2_ckpt": str(ckpt2),
            }
        )
        logger.info("fold %d done: phase2 F1 %.4f", fold, f1_2)
    phase2_scores = [f["phase2_f1"] for f in summary["folds"]]
    report = aggregate_folds(phase2_scores)
    summary["phase2_mean"] = report.mean
    summary["phase2_spread"] = report.spread
    summary["phase1_mean"] = {
        m.value: float(np.mean([f["phase1_f1"][m.value] for f in summary["folds"]]))
        for m in MODALITIES
    }
    (out_dir / "fold_summary.json").write_text(json.dumps(summary, indent=1))
    return summary
