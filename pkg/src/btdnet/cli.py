"""Command-line pipeline: synth, prep, report, train, eval, gradcheck, selftest."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, config_digest, load_config
from .data import (
    MODALITIES,
    ScanArrayCache,
    dataset_stats,
    load_manifest,
    prep_dataset,
)
from .errors import BtdnetError
from .evaluation import evaluate_fold, macro_f1, tta_predict, write_eval_report
from .network import BtdNet, apply_state, forward_scan, load_checkpoint
from .objective import FocalParams, focal_loss, loss_gradient_check, make_gradcheck_batch
from .sam import SamSGD, sam_step
from .synth import generate_synthetic
from .training import run_cross_validation, stratified_kfold

logger = logging.getLogger(__name__)


def _load_config(args) -> Config:
    return load_config(args.config) if getattr(args, "config", None) else Config()


def _cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.n is not None:
        cfg.synth.num_scans = args.n
    if args.seed is not None:
        cfg.synth.seed = args.seed
    manifest = generate_synthetic(cfg.synth, args.out)
    print(f"wrote {len(manifest)} scans under {manifest.root}")
    return 0


def _cmd_prep(args) -> int:
    cfg = _load_config(args)
    manifest = prep_dataset(args.root, args.out, cfg.data.min_area_frac)
    print(f"preprocessed cache at {manifest.root}")
    return 0


def _cmd_report(args) -> int:
    manifest = load_manifest(args.root)
    totals, per_scan = dataset_stats(manifest)
    out = Path(args.out) if args.out else Path(args.root) / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "slice_totals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["modality", "total"])
        for m in MODALITIES:
            w.writerow([m.value, totals[m]])
    with open(out / "slice_counts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_id", "modality", "count"])
        for scan_id, counts in per_scan:
            for m in MODALITIES:
                w.writerow([scan_id, m.value, counts[m]])
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
        names = [m.value for m in MODALITIES]
        ax1.bar(names, [totals[m] for m in MODALITIES])
        ax1.set_title("total slices per modality")
        for m in MODALITIES:
            ax2.hist(
                [c[m] for _, c in per_scan], bins=15, histtype="step", label=m.value
            )
        ax2.set_title("slices per scan")
        ax2.legend()
        fig.tight_layout()
        fig.savefig(out / "slices.png", dpi=110)
        plt.close(fig)
    except Exception as exc:  # plot is a nice-to-have
        logger.warning("skipping plot: %s", exc)
    print(f"report written to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.backbone is not None:
        cfg.model.backbone.kind = args.backbone
    if args.strict_length:
        cfg.train.strict_length = True
    folds = [args.fold] if args.fold is not None else None
    summary = run_cross_validation(args.root, cfg, args.out, folds)
    print(
        f"phase-2 macro-F1 mean {summary['phase2_mean']:.4f} "
        f"spread {summary['phase2_spread']:.4f} over {len(summary['folds'])} fold(s)"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt_path = Path(args.ckpt)
    out = Path(args.out) if args.out else (
        ckpt_path.parent if ckpt_path.is_file() else ckpt_path
    ) / "eval"
    manifest = load_manifest(args.root)
    cache = ScanArrayCache(args.root, manifest)
    split = stratified_kfold(manifest.labels(), cfg.train.folds, cfg.train.seed)
    ids = manifest.scan_ids()

    if ckpt_path.is_dir():
        fold_ckpts = {
            f: ckpt_path / "ckpt" / f"fold{f}" / "phase2_best.bin"
            for f in range(cfg.train.folds)
        }
    else:
        fold_ckpts = {args.fold if args.fold is not None else 0: ckpt_path}

    per_fold = []
    for fold, path in sorted(fold_ckpts.items()):
        payload = load_checkpoint(path)
        cfg.model = payload.model_config
        model = BtdNet(cfg.model)
        apply_state(model, payload.state)
        val_ids = [ids[i] for i in split.val_indices(fold)]
        f1 = evaluate_fold(
            model,
            cache,
            val_ids,
            cfg,
            use_tta=args.tta,
            dump_path=out / f"preds_fold{fold}.jsonl",
        )
        per_fold.append(f1)
        print(f"fold {fold}: macro-F1 {f1:.4f}" + (" (TTA)" if args.tta else ""))
    report = write_eval_report(
        out / "eval_report.json", per_fold, config_digest(cfg), cfg.augment.tta_seed
    )
    print(f"mean {report.mean:.4f} spread {report.spread:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else 0
    for m in cfg.model.t:
        cfg.model.t[m] = 8
    cfg.model.backbone.kind = "tiny_cnn"
    cfg.model.rnn_units = 16
    cfg.model.routing_units = 12
    cfg.model.fusion_units = 16
    torch.manual_seed(seed)
    model = BtdNet(cfg.model).double()
    batch = make_gradcheck_batch(cfg.model, 2, np.random.default_rng(seed))
    report = loss_gradient_check(model, batch, FocalParams.from_config(cfg.loss), seed=seed)
    print(
        f"gradient check: max relative error {report['max_rel_err']:.3e} "
        f"over {report['n_checked']} parameters"
    )
    return 0 if report["max_rel_err"] < 1e-4 else 1


def _selftest_checks():
    from .augment import hflip, mix_scans  # local: keeps startup light
    from .data import PAD_VALUE, Modality, Scan, Volume

    cfg = Config()
    for m in cfg.model.t:
        cfg.model.t[m] = 8
    cfg.model.rnn_units = 16
    cfg.model.routing_units = 12
    cfg.model.fusion_units = 16

    def make_scan(rng, lengths):
        vols = {}
        for m in MODALITIES:
            l = lengths[m]
            px = np.full((cfg.model.t[m], 224, 224, 3), PAD_VALUE, dtype=np.float32)
            px[:l] = rng.uniform(-1, 1, size=(l, 224, 224, 1)).astype(np.float32)
            vols[m] = Volume(m, px, l)
        return Scan("self", vols, 0)

    def check_padding_invariance():
        torch.manual_seed(0)
        model = BtdNet(cfg.model)
        rng = np.random.default_rng(0)
        lengths = {m: 5 for m in MODALITIES}
        scan = make_scan(rng, lengths)
        base, _ = forward_scan(model, scan)
        for m in MODALITIES:
            scan.volumes[m].pixels[lengths[m]:] = rng.uniform(-1, 1, size=scan.volumes[m].pixels[lengths[m]:].shape)
        again, _ = forward_scan(model, scan)
        return np.abs(base - again).max() < 1e-6

    def check_loss_identity():
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.normal(0, 3, size=(200, 2)))
        labels = rng.integers(0, 2, size=200)
        y = torch.stack([torch.tensor([1.0 - l, float(l)], dtype=torch.float64) for l in labels])
        fl = focal_loss(logits, y, FocalParams(alpha=0.5, gamma=0.0))
        d = logits[:, 1] - logits[:, 0]
        bce = -(y[:, 1] * torch.nn.functional.logsigmoid(d) + y[:, 0] * torch.nn.functional.logsigmoid(-d)).sum()
        return abs(float(fl) - 0.5 * float(bce)) < 1e-9

    def check_tta_identity():
        torch.manual_seed(2)
        model = BtdNet(cfg.model)
        rng = np.random.default_rng(2)
        scan = make_scan(rng, {m: 6 for m in MODALITIES})
        plain, _ = forward_scan(model, scan)
        p_final, label = tta_predict(model, scan, np.random.default_rng(0), force_identity=True)
        exact = np.array_equal(p_final, 4.0 * plain.astype(np.float64))
        scaled = int(np.argmax(3.7 * p_final)) == label
        return exact and scaled

    def check_flip_involution():
        rng = np.random.default_rng(3)
        arr = rng.uniform(-1, 1, size=(32, 32, 3)).astype(np.float32)
        return np.array_equal(hflip(hflip(arr)), arr)

    def check_mix_endpoints():
        rng = np.random.default_rng(4)
        a = make_scan(rng, {m: 4 for m in MODALITIES})
        b = make_scan(rng, {m: 6 for m in MODALITIES})
        b = Scan("b", b.volumes, 1)
        one = mix_scans(a, b, 1.0)
        zero = mix_scans(a, b, 0.0)
        ok = all(np.array_equal(one.volumes[m].pixels, a.volumes[m].pixels) for m in MODALITIES)
        ok &= all(np.array_equal(zero.volumes[m].pixels, b.volumes[m].pixels) for m in MODALITIES)
        half = mix_scans(a, b, 0.5)
        mid = 0.5 * a.volumes[Modality.T2].pixels + 0.5 * b.volumes[Modality.T2].pixels
        ok &= bool(np.abs(half.volumes[Modality.T2].pixels - mid).max() < 1e-12)
        return ok

    def check_sam_reduction():
        theta = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
        opt = SamSGD([theta], lr=0.1, momentum=0.0, rho=0.1)

        def closure():
            opt.zero_grad()
            loss = (theta**2).sum()
            loss.backward()
            return loss

        model = torch.nn.Linear(1, 1)  # unused by closure; satisfies signature
        sam_step(model, closure, opt)
        ok = abs(float(theta.detach()) - 0.78) < 1e-12

        torch.manual_seed(5)
        net_a = torch.nn.Linear(4, 2)
        torch.manual_seed(5)
        net_b = torch.nn.Linear(4, 2)
        opt_a = SamSGD(net_a.parameters(), lr=0.05, momentum=0.9, rho=0.0)
        opt_b = torch.optim.SGD(net_b.parameters(), lr=0.05, momentum=0.9)
        x = torch.randn(8, 4)
        for _ in range(10):
            def closure_a():
                opt_a.zero_grad()
                loss = (net_a(x) ** 2).sum()
                loss.backward()
                return loss

            sam_step(net_a, closure_a, opt_a)
            opt_b.zero_grad()
            (net_b(x) ** 2).sum().backward()
            opt_b.step()
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            ok &= bool(torch.equal(pa, pb))
        return ok

    def check_macro_f1():
        preds = [0] * 10
        trues = [0] * 5 + [1] * 5
        return abs(macro_f1(preds, trues) - 1.0 / 3.0) < 1e-15

    return [
        ("padding invariance", check_padding_invariance),
        ("focal loss reduces to halved cross-entropy at gamma=0", check_loss_identity),
        ("TTA identity: sum of identical versions is 4x plain logits", check_tta_identity),
        ("horizontal flip is an involution", check_flip_involution),
        ("mix endpoints and midpoint", check_mix_endpoints),
        ("SAM toy step and rho=0 reduction", check_sam_reduction),
        ("macro-F1 degenerate prediction equals 1/3", check_macro_f1),
    ]


def _cmd_selftest(args) -> int:
    failures = 0
    for name, fn in _selftest_checks():
        try:
            ok = fn()
        except Exception as exc:
            ok = False
            logger.error("%s raised: %s", name, exc)
        print(f"[{'ok' if ok else 'FAIL'}] {name}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="btdnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("prep", help="run the preprocessing pipeline over a dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_prep)

    p = sub.add_parser("report", help="emit slice-count CSVs and plots")
    p.add_argument("--root", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("train", help="two-phase k-fold training")
    p.add_argument("--root", required=True, help="preprocessed dataset root")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--config")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backbone", choices=["tiny_cnn", "resnet18_gap"], default=None)
    p.add_argument("--strict-length", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints")
    p.add_argument("--root", required=True, help="preprocessed dataset root")
    p.add_argument("--ckpt", required=True, help="checkpoint file or run directory")
    p.add_argument("--out", default=None)
    p.add_argument("--config")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--tta", action="store_true")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except BtdnetError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # unexpected: still a clean nonzero exit
        logger.exception("unhandled failure: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
