"""``voidseg`` command line: dataset creation, training, testing, reporting.

Exit codes: 0 success, 1 internal error, 2 bad input or configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config
from .extraction import BallCrop, BallDetection, extract_balls, write_extraction
from .groundtruth import (
    NON_VOID,
    estimate_ball_disc,
    import_manual_masks,
    label_crops,
    read_disc_index,
    write_labels,
)
from .imaging import ImageFormatError, load_image, load_mask, save_mask
from .manifest import ManifestError, read_manifest
from .segnet import TrainingError, load_checkpoint, predict_mask, save_checkpoint, train_classifier, train_unet
from .synth import generate_dataset, write_dataset

log = logging.getLogger("voidseg")

IMAGE_SUFFIXES = {".png", ".tif", ".tiff", ".bmp"}


class UsageError(Exception):
    """Bad input or configuration; maps to exit code 2."""


def _resolve(args, p):
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() or not args.workdir else Path(args.workdir) / p


def _config(args, section=None) -> RunConfig:
    return load_config(_resolve(args, getattr(args, "config", None)), args.set or (), section)


def _snapshot(cfg: RunConfig, out_dir: Path):
    cfg.write(out_dir / "effective_config.txt")


def _image_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise UsageError(f"not found: {path}")
    return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_extract_balls(args) -> int:
    cfg = _config(args, "extraction")
    boards = _image_files(_resolve(args, args.board))
    if not boards:
        raise UsageError("no boards found")
    out = _resolve(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("detections.jsonl", "balls.jsonl"):
        (out / name).unlink(missing_ok=True)
    total = 0
    for path in boards:
        board = load_image(path)
        grid = extract_balls(board, cfg.extraction)
        write_extraction(path.stem, board, grid, out, cfg.extraction)
        total += len(grid.balls)
        log.info("%s: %d balls", path.name, len(grid.balls))
    _snapshot(cfg, out)
    print(f"{total} balls from {len(boards)} board(s) -> {out}")
    return 0


def cmd_label(args) -> int:
    cfg = _config(args, "label")
    crops = _resolve(args, args.crops)
    if not crops.is_dir():
        raise UsageError(f"crop directory not found: {crops}")
    if args.masks:
        labels = import_manual_masks(crops, _resolve(args, args.masks), cfg.label)
    else:
        labels = label_crops(crops, cfg.label)
    out = write_labels(labels, _resolve(args, args.out))
    _snapshot(cfg, out.parent)
    n_void = sum(lab.cls != NON_VOID for lab in labels)
    print(f"{len(labels)} crops labelled ({n_void} void) -> {out}")
    return 0


def _crop_pool(crop_dir: Path, labels_path: Path | None) -> list[BallCrop]:
    discs = read_disc_index(crop_dir)
    allowed = None
    if labels_path is not None:
        with open(labels_path) as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        allowed = {r["ball_id"] for r in recs if r["class"] == NON_VOID}
    pool = []
    for path in sorted(crop_dir.glob("*.png")):
        if allowed is not None and path.stem not in allowed:
            continue
        img = load_image(path)
        cx, cy, r = discs.get(path.name) or estimate_ball_disc(img)
        pool.append(BallCrop(img, BallDetection(cx, cy, r), cx, cy))
    return pool


def cmd_synth(args) -> int:
    cfg = _config(args, "synth")
    crops = _resolve(args, args.crops)
    if not crops.is_dir():
        raise UsageError(f"crop directory not found: {crops}")
    pool = _crop_pool(crops, _resolve(args, args.labels))
    if not pool:
        raise UsageError("no non-void crops to augment")
    cfg.synth.validate(cfg.label.thr_min)
    samples = generate_dataset(pool, cfg.synth)
    out = _resolve(args, args.out)
    manifest = write_dataset(samples, out, split=args.split, prefix=args.prefix)
    _snapshot(cfg, out)
    print(f"{len(samples)} samples -> {manifest}")
    return 0


def _load_arrays(manifest: Path, splits, need_masks: bool):
    recs = [r for r in read_manifest(manifest, check_files=True) if r["split"] in splits]
    base = manifest.parent
    images = np.stack([load_image(base / r["image"]) for r in recs]) if recs else np.zeros((0, 64, 64), np.uint8)
    masks, labels = None, []
    if need_masks:
        missing = [r["id"] for r in recs if not r.get("mask")]
        if missing:
            raise UsageError(f"records without masks: {missing[:5]}")
        masks = np.stack([load_mask(base / r["mask"]) for r in recs]) if recs else None
    for i, r in enumerate(recs):
        if r.get("label") is not None:
            labels.append(1.0 if r["label"] == "void" else 0.0)
        elif r.get("mask"):
            m = masks[i] if masks is not None else load_mask(base / r["mask"])
            labels.append(float(m.any()))
        else:
            raise UsageError(f"record {r['id']} has neither label nor mask")
    return recs, images, masks, np.array(labels, dtype=np.float32)


def cmd_train(args) -> int:
    cfg = _config(args, "train")
    manifest = _resolve(args, args.manifest)
    unet = args.stage == "unet"
    _, x_tr, m_tr, y_tr = _load_arrays(manifest, {"train"}, unet)
    if len(x_tr) == 0:
        raise UsageError("manifest has no train records")
    val_recs, x_va, m_va, y_va = _load_arrays(manifest, {"val"}, unet)
    val = None
    if val_recs:
        val = (x_va, m_va if unet else y_va)
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(".log.jsonl")
    log_path.unlink(missing_ok=True)
    if unet:
        enc = None
        if args.encoder:
            enc_model, _ = load_checkpoint(_resolve(args, args.encoder))
            enc = enc_model.state_dict()
        else:
            print("warning: no classifier checkpoint given; U-Net encoder starts from random weights", file=sys.stderr)
        res = train_unet(x_tr, m_tr, cfg.train, encoder_state=enc, val=val, log_path=log_path)
    else:
        res = train_classifier(x_tr, y_tr, cfg.train, val=val, log_path=log_path)
    path = save_checkpoint(res.model, out, res.meta)
    _snapshot(cfg, out.parent)
    print(f"{args.stage} checkpoint (epoch {res.best_epoch}) -> {path}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args, "post")
    model, meta = load_checkpoint(_resolve(args, args.ckpt))
    if meta.get("stage", "unet") != "unet":
        raise UsageError("infer needs a U-Net checkpoint")
    src = _resolve(args, args.crops)
    if src.is_file():
        recs = read_manifest(src, check_files=True)
        if args.split:
            recs = [r for r in recs if r["split"] == args.split]
        items = [(r["id"], src.parent / r["image"]) for r in recs]
        discs = {}
    elif src.is_dir():
        items = [(p.stem, p) for p in sorted(src.glob("*.png"))]
        discs = read_disc_index(src)
    else:
        raise UsageError(f"not found: {src}")
    if not items:
        raise UsageError("no crops to run on")
    images = np.stack([load_image(p) for _, p in items])
    probs = predict_mask(model, images)
    out = _resolve(args, args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.jsonl", "w") as fh:
        for (bid, path), img, prob in zip(items, images, probs):
            disc = discs.get(path.name) or estimate_ball_disc(img)
            res = ev.postprocess(prob, disc, cfg.post.threshold, cfg.post.a_min, bid)
            save_mask(res.mask, out / "masks" / f"{bid}.png")
            fh.write(json.dumps(res.to_record()) + "\n")
    _snapshot(cfg, out)
    print(f"{len(items)} predictions -> {out}")
    return 0


def _mask_dir(path: Path) -> dict[str, np.ndarray]:
    if path.is_file():
        recs = read_manifest(path, check_files=True)
        return {r["id"]: load_mask(path.parent / r["mask"]) for r in recs if r.get("mask")}
    if (path / "masks").is_dir():
        path = path / "masks"
    if not path.is_dir():
        raise UsageError(f"not found: {path}")
    return {p.stem: load_mask(p) for p in sorted(path.glob("*.png"))}


def cmd_evaluate(args) -> int:
    cfg = _config(args, "post")
    pred = _mask_dir(_resolve(args, args.pred))
    gt = _mask_dir(_resolve(args, args.gt))
    if args.split and _resolve(args, args.gt).is_file():
        keep = {r["id"] for r in read_manifest(_resolve(args, args.gt)) if r["split"] == args.split}
        gt = {k: v for k, v in gt.items() if k in keep}
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise UsageError(f"no prediction for {len(missing)} ground-truth masks, e.g. {missing[0]}")
    pred = {k: pred[k] for k in gt}
    report = ev.match_and_score(
        pred, gt, cfg.post.iou_min, name=args.name or "", a_min=cfg.post.a_min, threshold=cfg.post.threshold
    )
    out = _resolve(args, args.out)
    report.write(out)
    out.with_suffix(".txt").write_text(ev.format_table([report]) + "\npixel level\n" + ev.format_table([report], "pixel"))
    _snapshot(cfg, out.parent)
    r = report.region
    print(f"P={r['precision']:.3f} R={r['recall']:.3f} F1={r['f1']:.3f} -> {out}")
    return 0


def cmd_report(args) -> int:
    reports = [ev.load_report(_resolve(args, p)) for p in args.eval]
    names = args.names or [
        ev.TABLE3_ROWS[i] if i < len(ev.TABLE3_ROWS) and len(reports) == len(ev.TABLE3_ROWS) else None
        for i in range(len(reports))
    ]
    if len(names) != len(reports):
        raise UsageError("--names must give one name per eval file")
    for rep, name, path in zip(reports, names, args.eval):
        rep["name"] = name or rep.get("name") or Path(path).stem
    text = ev.format_table(reports) + "\npixel level\n" + ev.format_table(reports, "pixel")
    out = _resolve(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voidseg", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("extract-balls", cmd_extract_balls, "locate balls on boards and write 64x64 crops")
    sp.add_argument("--board", required=True, help="board image or directory of boards")
    sp.add_argument("--out", required=True)

    sp = add("label", cmd_label, "classify crops as void / non-void")
    sp.add_argument("--crops", required=True)
    sp.add_argument("--masks", help="directory of manual {0,255} masks named like the crops")
    sp.add_argument("--out", required=True, help="labels manifest (JSON lines)")

    sp = add("synth", cmd_synth, "augment non-void crops with synthetic voids")
    sp.add_argument("--crops", required=True)
    sp.add_argument("--labels", help="labels manifest; only non_void crops are used")
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="train", choices=("train", "val", "test"))
    sp.add_argument("--prefix", default="syn")

    sp = add("train", cmd_train, "train the classifier or the U-Net")
    sp.add_argument("--stage", required=True, choices=("classifier", "unet"))
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--encoder", help="classifier checkpoint to initialise the U-Net encoder")
    sp.add_argument("--out", required=True, help="checkpoint path (.npz + .json sidecar)")

    sp = add("infer", cmd_infer, "predict void masks for crops")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--crops", required=True, help="crop directory or dataset manifest")
    sp.add_argument("--split", help="manifest split to use")
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "score predicted masks against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True, help="mask directory or dataset manifest")
    sp.add_argument("--split", help="manifest split to score")
    sp.add_argument("--name", help="row name for reports")
    sp.add_argument("--out", required=True, help="report JSON path (.txt written alongside)")

    sp = sub.add_parser("report", help="join evaluation reports into one table")
    sp.add_argument("--eval", nargs="+", required=True)
    sp.add_argument("--names", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, ImageFormatError, FileNotFoundError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
