"""Command-line interface.

Subcommands cover dataset generation, codec fitting and analysis, matching,
loss evaluation, the toy trainer, inference, and the gradient verification
suite. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import codec as codec_mod
from . import io as sio
from . import losses, refine, report, verify
from .matching import CostWeights, GroundTruthSet, PredictionSet, match
from .shapes import ShapesConfig, gen_shapes, mask_corpus

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


def _weights_from_args(args) -> CostWeights:
    return CostWeights(l1=args.lambda_l1, giou=args.lambda_giou,
                       cls=args.lambda_cls, mask=args.lambda_mask)


def _add_weight_args(p):
    p.add_argument("--lambda-l1", type=float, default=5.0)
    p.add_argument("--lambda-giou", type=float, default=2.0)
    p.add_argument("--lambda-cls", type=float, default=2.0)
    p.add_argument("--lambda-mask", type=float, default=2.0)


def cmd_gen_shapes(args) -> int:
    cfg = ShapesConfig(seed=args.seed, image_size=args.image_size,
                       min_shapes=args.min_shapes, max_shapes=args.max_shapes)
    doc, images = gen_shapes(cfg, args.n_images)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc.save(out / "annotations.json")
    sio.save_tensors(out / "images.tns",
                     {f"image_{i}": images[i] for i in range(len(images))})
    print(json.dumps({"images": len(doc.images), "instances": len(doc.instances),
                      "out": str(out)}))
    return 0


def _load_dataset(path):
    root = Path(path)
    doc = sio.AnnotationDoc.load(root / "annotations.json")
    tensors = sio.load_tensors(root / "images.tns")
    images = np.stack([tensors[f"image_{im.id}"] for im in doc.images])
    return doc, images


def cmd_fit_codec(args) -> int:
    doc, _ = _load_dataset(args.data)
    masks = mask_corpus(doc, args.side)
    codec = codec_mod.fit(masks, dim=args.dim, center=args.center)
    sio.save_codec(args.out, codec)
    err = codec_mod.reconstruction_error(codec, masks)
    total = float(codec.spectrum.sum())
    print(json.dumps({
        "masks": len(masks), "side": codec.side, "dim": codec.dim,
        "center": args.center,
        "train_reconstruction_error": err,
        "captured_energy_ratio": 1.0 - err / total if total > 0 else 1.0,
        "out": args.out,
    }))
    return 0


def cmd_spectrum(args) -> int:
    doc, _ = _load_dataset(args.data)
    masks = mask_corpus(doc, args.side)
    rows = codec_mod.energy_spectrum(masks, top=args.top, center=args.center)
    cumulative = np.cumsum(rows[:, 1])
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rank", "energy_ratio", "cumulative"])
        for (idx, ratio), cum in zip(rows, cumulative):
            writer.writerow([int(idx), f"{ratio:.12g}", f"{cum:.12g}"])
    if args.figure:
        report.spectrum_figure(rows, args.figure)
    print(json.dumps({"components": len(rows),
                      "cumulative_at_end": float(cumulative[-1]),
                      "out": args.out}))
    return 0


def cmd_eval_recon(args) -> int:
    doc, _ = _load_dataset(args.data)
    masks = mask_corpus(doc, args.side)
    dims = [int(v) for v in args.l_sweep.split(",")] if args.l_sweep else None
    out = {"masks": int(len(masks)), "empty_excluded": 0, "results": []}
    nonempty = masks[(masks.sum(axis=(1, 2)) > 0)]
    out["empty_excluded"] = int(len(masks) - len(nonempty))

    def evaluate(codec):
        ious = [codec_mod.reconstruction_iou(codec, m) for m in nonempty]
        return {"dim": codec.dim,
                "mean_iou": float(np.mean(ious)),
                "p10_iou": float(np.percentile(ious, 10)),
                "p50_iou": float(np.percentile(ious, 50))}

    if dims:
        for dim in dims:
            out["results"].append(evaluate(codec_mod.fit(masks, dim=dim,
                                                         center=args.center)))
    else:
        out["results"].append(evaluate(sio.load_codec(args.codec)))
    Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    if args.figure and dims:
        report.recon_sweep_figure([r["dim"] for r in out["results"]],
                                  [r["mean_iou"] for r in out["results"]],
                                  args.figure)
    print(json.dumps({"results": out["results"]}))
    return 0


def cmd_match(args) -> int:
    gt_t = sio.load_tensors(args.gt)
    pred_t = sio.load_tensors(args.pred)
    codec = sio.load_codec(args.codec)
    gt = GroundTruthSet(boxes=gt_t["boxes"], classes=gt_t["classes"].astype(np.int64),
                        masks=gt_t["masks"])
    pred = PredictionSet(boxes=pred_t["boxes"], probs=pred_t["probs"],
                         embeddings=pred_t["embeddings"])
    w = _weights_from_args(args)
    from .matching import box_cost, class_cost, mask_cost
    assignment = match(gt, pred, codec, w)
    pairs = []
    for i, j in enumerate(assignment.indices):
        pairs.append({
            "gt": i, "pred": int(j),
            "box_cost": box_cost(gt.boxes[i], pred.boxes[j], w),
            "class_cost": class_cost(int(gt.classes[i]), pred.probs[j], w),
            "mask_cost": mask_cost(gt.masks[i], pred.embeddings[j], codec, w),
        })
    result = {"indices": [int(j) for j in assignment.indices],
              "total_cost": assignment.total_cost, "pairs": pairs}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_loss(args) -> int:
    gt_t = sio.load_tensors(args.gt)
    pred_t = sio.load_tensors(args.pred)
    codec = sio.load_codec(args.codec)
    gt = GroundTruthSet(boxes=gt_t["boxes"], classes=gt_t["classes"].astype(np.int64),
                        masks=gt_t["masks"])
    pred = PredictionSet(boxes=pred_t["boxes"], probs=pred_t["probs"],
                         embeddings=pred_t["embeddings"])
    w = _weights_from_args(args)
    assignment = match(gt, pred, codec, w)
    breakdown = losses.set_loss(gt, pred, assignment, codec, w)
    print(json.dumps(breakdown.to_dict(), indent=2, sort_keys=True))
    return 0


def _refine_config(args) -> refine.RefineConfig:
    if args.config:
        cfg = refine.RefineConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = refine.RefineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "lr", None) is not None:
        cfg.lr = args.lr
    return cfg


def cmd_train_toy(args) -> int:
    doc, images = _load_dataset(args.data)
    codec = sio.load_codec(args.codec)
    cfg = _refine_config(args)
    cfg.embed_dim = codec.dim
    cfg.mask_side = codec.side
    cfg.num_categories = doc.num_categories
    cfg.image_size = doc.images[0].width
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, metrics = refine.train_toy(doc, images, codec, cfg,
                                      max_steps=args.steps)
    with open(out / "metrics.jsonl", "w") as f:
        for m in metrics:
            f.write(json.dumps(m, sort_keys=True) + "\n")
    sio.save_tensors(out / "checkpoint.tns",
                     {name: p.detach().numpy()
                      for name, p in model.named_parameters()})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2,
                                                sort_keys=True))
    report.training_curve_figure(metrics, out / "loss_curve.png")
    quality = refine.evaluate_toy(model, doc, images, codec)
    (out / "quality.json").write_text(json.dumps(quality, indent=2, sort_keys=True))
    print(json.dumps({"steps": len(metrics),
                      "final_loss": metrics[-1]["loss"], **quality}))
    return 0


def load_checkpoint(run_dir, codec) -> refine.RefineModel:
    run = Path(run_dir)
    cfg = refine.RefineConfig.from_dict(json.loads((run / "config.json").read_text()))
    model = refine.RefineModel(cfg)
    state = sio.load_tensors(run / "checkpoint.tns")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in state.items()})
    return model


def cmd_infer_toy(args) -> int:
    doc, images = _load_dataset(args.data)
    codec = sio.load_codec(args.codec)
    model = load_checkpoint(args.run, codec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump = {}
    summary = []
    for im in doc.images:
        pyramid = model.pyramid_for(images[im.id])
        final, scores, trace = refine.run_inference(model, pyramid)
        masks = refine.predicted_masks(final, codec, (im.height, im.width))
        for s, stage in enumerate(trace):
            dump[f"image_{im.id}_stage_{s}_boxes"] = stage["boxes"]
        dump[f"image_{im.id}_scores"] = scores
        dump[f"image_{im.id}_masks"] = masks.astype(np.float32)
        summary.append({"image_id": im.id, "predictions": final.count,
                        "high_score": int((scores > 0.5).sum())})
    sio.save_tensors(out / "predictions.tns", dump)
    quality = refine.evaluate_toy(model, doc, images, codec)
    (out / "quality.json").write_text(json.dumps(quality, indent=2, sort_keys=True))
    print(json.dumps({"images": summary, **quality}))
    return 0


def cmd_grad_check(args) -> int:
    rep = verify.run_suite(scopes=args.scope, n_points=args.points,
                           seed=args.seed or 0, corrupt=args.corrupt)
    print(json.dumps(rep, indent=2, sort_keys=True))
    return 0 if rep["pass"] else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="setseg",
                                description=__doc__.strip().splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="global RNG seed")
    p.add_argument("--threads", type=int, default=1,
                   help="torch thread count; 1 gives bitwise determinism")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file for the trainer")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-shapes", help="generate the synthetic shapes dataset")
    g.add_argument("--n-images", type=int, default=20)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--min-shapes", type=int, default=1)
    g.add_argument("--max-shapes", type=int, default=3)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_shapes, default_seed=0)

    f = sub.add_parser("fit-codec", help="fit the mask codec on a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--dim", "-l", type=int, default=60)
    f.add_argument("--side", type=int, default=28)
    f.add_argument("--center", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_codec)

    s = sub.add_parser("spectrum", help="component energy spectrum as CSV (+figure)")
    s.add_argument("--data", required=True)
    s.add_argument("--side", type=int, default=28)
    s.add_argument("--top", type=int, default=None)
    s.add_argument("--center", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--figure", default=None)
    s.set_defaults(func=cmd_spectrum)

    e = sub.add_parser("eval-recon", help="reconstruction IoU report")
    e.add_argument("--data", required=True)
    e.add_argument("--codec", default=None)
    e.add_argument("--side", type=int, default=28)
    e.add_argument("--center", action="store_true")
    e.add_argument("--l-sweep", default=None,
                   help="comma-separated dims; fits a codec per dim")
    e.add_argument("--out", required=True)
    e.add_argument("--figure", default=None)
    e.set_defaults(func=cmd_eval_recon)

    m = sub.add_parser("match", help="optimal assignment between gt and predictions")
    m.add_argument("--gt", required=True)
    m.add_argument("--pred", required=True)
    m.add_argument("--codec", required=True)
    m.add_argument("--out", default=None)
    _add_weight_args(m)
    m.set_defaults(func=cmd_match)

    lo = sub.add_parser("loss", help="set loss breakdown for a gt/pred pair")
    lo.add_argument("--gt", required=True)
    lo.add_argument("--pred", required=True)
    lo.add_argument("--codec", required=True)
    _add_weight_args(lo)
    lo.set_defaults(func=cmd_loss)

    t = sub.add_parser("train-toy", help="train the refinement model at toy scale")
    t.add_argument("--data", required=True)
    t.add_argument("--codec", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_toy)

    i = sub.add_parser("infer-toy", help="run inference with a trained checkpoint")
    i.add_argument("--data", required=True)
    i.add_argument("--codec", required=True)
    i.add_argument("--run", required=True, help="training output directory")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer_toy)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--scope", default="all",
                    choices=sorted(set(verify.SCOPE_GROUPS) | set(verify.SCOPES)))
    gc.add_argument("--points", type=int, default=50)
    gc.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    gc.set_defaults(func=cmd_grad_check)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    torch.set_num_threads(max(1, args.threads))
    if args.seed is None:
        args.seed = getattr(args, "default_seed", None)
    if args.seed is not None:
        np.random.seed(args.seed)
        torch.manual_seed(args.seed)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
