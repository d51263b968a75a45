"""Command-line entry point: ``ctxmono3d <command> [flags]``.

Config files hold one ``key = value`` per line (``#`` starts a comment); keys
are long flag names with ``-`` or ``_``.  Boolean flags take true/false.
Config entries are applied first, explicit flags override them.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("ctxmono3d")

AP_IOUS = (0.5, 0.7)
AP_MODES = ("R11", "R40")


class DataError(RuntimeError):
    """Runtime/data failure reported with exit code 1."""


# ---------------------------------------------------------------- output helpers


def fmt(v) -> str:
    """Shortest round-trip text for numbers."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write("\n")


class Run:
    """Collects artifacts of one command and writes its manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out = args.out_dir
        os.makedirs(self.out, exist_ok=True)
        self.artifacts: List[str] = []
        self.started = time.time()

    def path(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.out, name)

    def finish(self) -> None:
        skip = ("func", "config", "replay", "replay_into", "argv")
        cfg = {k: v for k, v in vars(self.args).items() if k not in skip}
        from ._backend import BACKEND

        write_json(os.path.join(self.out, "manifest.json"), {
            "command": self.args.command,
            "argv": self.args.argv,
            "config": cfg,
            "seed": getattr(self.args, "seed", None),
            "artifacts": sorted(set(self.artifacts)),
            "started": self.started,
            "finished": time.time(),
            "version": __version__,
            "backend": BACKEND,
        })


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .gradsuite import SUITES, run_suite, threshold_for

    suites = list(SUITES) if args.suite == ["all"] else args.suite
    run = Run(args)
    report = {"threshold": args.threshold, "trials": args.trials, "seed": args.seed, "suites": {}}
    ok = True
    for name in suites:
        rep = run_suite(name, args.trials, args.seed)
        thr = threshold_for(name, args.threshold)
        passed = rep.n_checked > 0 and rep.max_rel_err <= thr
        ok &= passed
        d = rep.to_dict()
        d.update(threshold=thr, passed=passed)
        report["suites"][name] = d
        print(f"{name}: checked={rep.n_checked} excluded={rep.n_excluded} "
              f"max_rel_err={rep.max_rel_err!r} {'PASS' if passed else 'FAIL'}")
    report["passed"] = ok
    write_json(run.path("gradcheck.json"), report)
    run.finish()
    return 0 if ok else 1


# ---------------------------------------------------------------- fit


def _loss_cfg(args):
    from .weak3d_losses import LossConfig

    return LossConfig(neighborhood_radius=args.radius, lam=args.lam)


def cmd_fit(args) -> int:
    if args.synth:
        return _fit_synth(args)
    return _fit_kitti(args)


def _fit_synth(args) -> int:
    from .synth_eval import recovery_trial

    run = Run(args)
    cfg = _loss_cfg(args)
    perturb = (args.perturb_xz, args.perturb_xz, args.perturb_yaw)
    rows, trace_rows = [], []
    n_ok = n_skip = 0
    for k in range(args.trials):
        t = recovery_trial(k, args.seed, args.noise, perturb, cfg)
        if t.fit is None:
            log.warning("trial %d: no RoI points, skipped", k)
            n_skip += 1
            continue
        n_ok += t.success
        rows.append([k, t.scene_seed, t.n_points, t.gt.cx, t.gt.cz, t.gt.yaw, t.fit.cx, t.fit.cz,
                     t.fit.yaw, t.iou, t.yaw_err_deg, t.center_err, t.success])
        trace_rows.extend([k, i, v] for i, v in enumerate(t.trace))
    write_csv(run.path("fits.csv"), ["trial", "scene_seed", "n_points", "gt_cx", "gt_cz", "gt_yaw",
                                     "fit_cx", "fit_cz", "fit_yaw", "iou_bev", "yaw_err_deg",
                                     "center_err", "success"], rows)
    write_csv(run.path("traces.csv"), ["trial", "iteration", "loss"], trace_rows)
    n_fit = len(rows)
    summary = {
        "trials": args.trials,
        "fitted": n_fit,
        "skipped": n_skip,
        "success_rate": n_ok / args.trials if args.trials else 0.0,
        "mean_iou_bev": float(np.mean([r[9] for r in rows])) if rows else None,
        "mean_yaw_err_deg": float(np.mean([r[10] for r in rows])) if rows else None,
        "mean_center_err": float(np.mean([r[11] for r in rows])) if rows else None,
    }
    write_json(run.path("summary.json"), summary)
    run.finish()
    print(f"success_rate={summary['success_rate']!r} (IoU>0.9 and yaw error<2 deg) over {args.trials} trials")
    return 0


def _fit_kitti(args) -> int:
    from . import kitti_io
    from .geom_bev import rotated_iou_bev
    from .weak3d_losses import BoxParams, fit_box, yaw_error

    if args.frame is None:
        raise argparse.ArgumentTypeError("--kitti needs --frame")
    try:
        frame = kitti_io.load_frame(args.kitti, args.frame)
    except FileNotFoundError as e:
        raise DataError(str(e)) from None
    hf = kitti_io.HeightFilter(enabled=args.height_filter)
    run = Run(args)
    cfg = _loss_cfg(args)
    rows, trace_rows, fitted = [], [], []
    skipped = 0
    for i, lab in enumerate(frame.labels):
        if lab.cls not in args.classes:
            continue
        pts = kitti_io.extract_roi_points(frame.cloud, frame.calib, lab.bbox, hf, lab, frame.image_shape)
        if len(pts) < args.min_points:
            log.warning("frame %s object %d: %d RoI points, skipped", frame.frame_id, i, len(pts))
            skipped += 1
            continue
        gt = lab.to_bev_box()
        init = BoxParams(gt.cx, gt.cz, gt.yaw) if args.init == "label" else BoxParams(
            float(np.mean(pts[:, 0])), float(np.mean(pts[:, 1])), gt.yaw)
        res = fit_box(pts, init, (gt.length, gt.width), cfg)
        fb = res.params.to_box(gt.length, gt.width)
        fb = type(fb)(fb.cx, fb.cz, fb.yaw, fb.length, fb.width, gt.y_base, gt.height)
        iou = rotated_iou_bev(fb, gt)
        rows.append([frame.frame_id, i, len(pts), fb.cx, fb.cz, fb.yaw, iou,
                     math.degrees(yaw_error(fb.yaw, gt.yaw)), math.hypot(fb.cx - gt.cx, fb.cz - gt.cz)])
        trace_rows.extend([i, k, v] for k, v in enumerate(res.trace))
        fitted.append(kitti_io.LabelRecord.from_bev_box(fb, lab.bbox, lab.cls, score=1.0,
                                                        truncation=lab.truncation, occlusion=lab.occlusion))
    write_csv(run.path("fits.csv"), ["frame", "object", "n_points", "fit_cx", "fit_cz", "fit_yaw",
                                     "iou_bev", "yaw_err_deg", "center_err"], rows)
    write_csv(run.path("traces.csv"), ["object", "iteration", "loss"], trace_rows)
    with open(run.path(f"{frame.frame_id}.txt"), "w") as f:
        f.write(kitti_io.serialize_labels(fitted))
    write_json(run.path("summary.json"), {"frame": frame.frame_id, "fitted": len(rows), "skipped": skipped})
    run.finish()
    print(f"frame {frame.frame_id}: fitted {len(rows)} boxes, skipped {skipped}")
    return 0


# ---------------------------------------------------------------- training


def _dataset(args):
    from .d2od import make_toy_dataset

    return make_toy_dataset(args.scenes, args.objects, args.seed, args.signature_strength, args.noise)


def _context(args, data):
    from .d2od import make_context_model

    c = data.scene_cfg.image_channels
    return make_context_model(args.context_seed, c, args.d, args.emb, args.signature_strength)


def _stage_cfg(args, **kw):
    from .d2od import StageConfig
    from .rocm import RocmConfig

    return StageConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        rocm=RocmConfig(args.temperature, args.direction), loss=_loss_cfg(args),
        optimizer=args.optimizer, d=args.d, emb=args.emb, **kw,
    )


def _curve_csv(path, curve):
    keys = list(curve[0].keys())
    write_csv(path, keys, [[row[k] for k in keys] for row in curve])


def cmd_rocm_pretrain(args) -> int:
    from . import encoders_toy as enc
    from .d2od import grouping_margin, run_stage1, scene_embeddings

    data = _dataset(args)
    ctx = _context(args, data)
    cfg = _stage_cfg(args, alignment=args.alignment)
    res = run_stage1(cfg, data, ctx)
    run = Run(args)
    _curve_csv(run.path("curve.csv"), res.curve)
    arrays = {"ctx_strength": np.array([ctx.signature_strength])}
    arrays.update(res.encoder.to_dict("m3d."))
    arrays.update(res.proj.to_dict("proj."))
    arrays.update(ctx.encoder.to_dict("ctx.enc."))
    arrays.update(ctx.proj.to_dict("ctx.proj."))
    enc.save_record(run.path(args.checkpoint), arrays)
    E, owner = scene_embeddings(res.encoder, res.proj, data.scenes)
    intra, inter = grouping_margin(E, owner)
    first, last = res.curve[0]["total"], res.curve[-1]["total"]
    write_json(run.path("summary.json"), {"initial_loss": first, "final_loss": last,
                                          "intra_scene_cos": intra, "inter_scene_cos": inter})
    run.finish()
    print(f"loss {first!r} -> {last!r}; intra-scene cos {intra!r}, inter-scene cos {inter!r}")
    return 0


def load_pretrained(path):
    from . import encoders_toy as enc

    if not os.path.isfile(path):
        raise DataError(f"missing checkpoint: {path}")
    try:
        rec = enc.load_record(path)
        return enc.ToyEncoderParams.from_dict(rec, "m3d.")
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: not a pretrain checkpoint ({e})") from None


def cmd_d2od_train(args, parser) -> int:
    from . import encoders_toy as enc
    from .d2od import run_stage2

    if args.regime == "one_stage" and args.pretrained:
        parser.error("regime one_stage trains from scratch; drop --pretrained")
    if args.regime != "one_stage" and not args.pretrained:
        parser.error(f"regime {args.regime} needs --pretrained")
    pretrained = load_pretrained(args.pretrained) if args.pretrained else None
    data = _dataset(args)
    ctx = _context(args, data) if args.regime == "one_stage" else None
    cfg = _stage_cfg(args, regime=args.regime, fusion_mode=args.fusion_mode,
                     stop_grad_fused=args.stop_grad_fused)
    res = run_stage2(cfg, pretrained, data, ctx)
    run = Run(args)
    _curve_csv(run.path("curve.csv"), res.curve)
    arrays = dict(res.encoder.to_dict("sp."))
    arrays.update(res.head.to_dict("head."))
    if res.fusion is not None:
        arrays.update(res.fusion.to_dict("fusion."))
    enc.save_record(run.path(args.checkpoint), arrays)
    first, last = res.curve[0], res.curve[-1]
    write_json(run.path("summary.json"), {"regime": args.regime, "initial": first, "final": last})
    run.finish()
    print(f"{args.regime}: total {first['total']!r} -> {last['total']!r}, "
          f"mse {first['mse']!r} -> {last['mse']!r}")
    return 0


# ---------------------------------------------------------------- eval-ap


def _records(labels: Dict[str, list], classes, with_score: bool):
    from .synth_eval import DetectionRecord

    out = []
    for fid in sorted(labels):
        for lab in labels[fid]:
            if lab.cls not in classes:
                continue
            score = lab.score if (with_score and lab.score is not None) else 1.0
            out.append((lab, DetectionRecord(lab.to_bev_box(), score, lab.cls, fid)))
    return out


def cmd_eval_ap(args) -> int:
    from . import kitti_io
    from .geom_bev import iou_3d, rotated_iou_bev
    from .synth_eval import ap_interpolated

    for p in (args.gt, args.det):
        if not os.path.isdir(p):
            raise DataError(f"missing directory: {p}")
    ids = None
    if args.ids:
        if not os.path.isfile(args.ids):
            raise DataError(f"missing id list: {args.ids}")
        ids = kitti_io.load_id_list(open(args.ids).read())
    gt_labels = kitti_io.read_label_dir(args.gt, ids)
    det_labels = kitti_io.read_label_dir(args.det, sorted(gt_labels))
    gts = _records(gt_labels, args.classes, False)
    dets = [d for _, d in _records(det_labels, args.classes, True)]
    if not gts:
        raise DataError("no ground-truth objects of the evaluated classes")
    iou_fn = rotated_iou_bev if args.metric == "bev" else iou_3d
    rows, table = [], {}
    for level in kitti_io.DIFFICULTIES:
        ignore = [not kitti_io.meets_difficulty(lab, level) for lab, _ in gts]
        for mode in AP_MODES:
            for thr in args.iou:
                key = f"{args.metric}_{mode}_iou{thr}_{level}"
                if all(ignore):
                    ap = None
                else:
                    ap = ap_interpolated(dets, [g for _, g in gts], thr, mode, iou_fn, ignore)
                table[key] = ap
                rows.append([args.metric, mode, thr, level, "" if ap is None else ap])
    run = Run(args)
    write_csv(run.path("ap.csv"), ["metric", "mode", "iou", "difficulty", "ap"], rows)
    write_json(run.path("ap.json"), table)
    run.finish()
    for r in rows:
        print(" ".join(fmt(v) for v in r))
    return 0


# ---------------------------------------------------------------- parser


def _floats_list(s: str) -> List[float]:
    return [float(v) for v in s.split(",")]


def _suite_list(s: str) -> List[str]:
    from .gradsuite import SUITES

    names = [v.strip() for v in s.split(",") if v.strip()]
    if names == ["all"]:
        return names
    bad = [n for n in names if n not in SUITES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown suite {','.join(bad) or s!r}; choose from all, {', '.join(SUITES)}")
    return names


def _add_common(p, seed: int):
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out-dir", default=".", help="directory for all outputs and manifest.json")


def _add_loss(p):
    from .weak3d_losses import LossConfig

    d = LossConfig()
    p.add_argument("--radius", type=float, default=d.neighborhood_radius, help="neighbourhood radius R (m)")
    p.add_argument("--lam", type=float, default=d.lam, help="center-loss weight")


def _add_training(p, epochs: int):
    from .d2od import StageConfig

    d = StageConfig()
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--objects", type=int, default=4)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default=d.optimizer)
    p.add_argument("--temperature", type=float, default=d.rocm.temperature)
    p.add_argument("--direction", choices=("tai_to_m3d", "symmetric"), default=d.rocm.direction)
    p.add_argument("--signature-strength", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--context-seed", type=int, default=777)
    p.add_argument("--d", type=int, default=d.d, help="feature channels")
    p.add_argument("--emb", type=int, default=d.emb, help="embedding dims")
    p.add_argument("--checkpoint", default="checkpoint.bin")
    _add_loss(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctxmono3d", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--replay", help="re-run the command recorded in a manifest.json")
    ap.add_argument("--replay-into", metavar="DIR", help="with --replay, write outputs to DIR instead")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--suite", type=_suite_list, default=["all"], help="all or comma list")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--threshold", type=float, default=1e-4)
    _add_common(p, 7)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fit", help="box fitting on synthetic or KITTI RoI points")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synth", action="store_true")
    src.add_argument("--kitti", metavar="ROOT", help="directory holding calib/ velodyne/ label_2/")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--perturb-xz", type=float, default=0.5)
    p.add_argument("--perturb-yaw", type=float, default=0.2)
    p.add_argument("--frame")
    p.add_argument("--region-from-labels", action="store_true", help="use label 2D boxes as RoI regions")
    p.add_argument("--classes", type=lambda s: s.split(","), default=["Car"])
    p.add_argument("--min-points", type=int, default=3)
    p.add_argument("--init", choices=("label", "centroid"), default="centroid")
    p.add_argument("--height-filter", action="store_true")
    _add_loss(p)
    _add_common(p, 0)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rocm-pretrain", help="stage-1 contrastive pre-training on toy scenes")
    p.add_argument("--alignment", choices=("rocm", "mse", "kl"), default="rocm")
    _add_training(p, 20)
    _add_common(p, 1)
    p.set_defaults(func=cmd_rocm_pretrain)

    from .d2od import FUSION_MODES, REGIMES

    p = sub.add_parser("d2od-train", help="stage-2 training under one regime")
    p.add_argument("--regime", choices=REGIMES, default="d2od_fusion")
    p.add_argument("--pretrained", help="rocm-pretrain checkpoint")
    p.add_argument("--fusion-mode", choices=FUSION_MODES, default="concat_mlp")
    p.add_argument("--stop-grad-fused", action="store_true")
    _add_training(p, 50)
    _add_common(p, 1)
    p.set_defaults(func=cmd_d2od_train)

    p = sub.add_parser("eval-ap", help="KITTI-style AP over label directories")
    p.add_argument("--gt", required=True, help="label_2 directory")
    p.add_argument("--det", required=True, help="detections directory (label format + score)")
    p.add_argument("--ids", help="id-list file restricting frames")
    p.add_argument("--classes", type=lambda s: s.split(","), default=["Car"])
    p.add_argument("--metric", choices=("bev", "3d"), default="bev")
    p.add_argument("--iou", type=_floats_list, default=list(AP_IOUS))
    _add_common(p, 0)
    p.set_defaults(func=cmd_eval_ap)
    return ap


def parse_config(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{ln}: expected 'key = value'")
        out[key.strip().replace("_", "-")] = val.strip()
    return out


def _config_tokens(cfg: Dict[str, str], sub: argparse.ArgumentParser) -> List[str]:
    flags = {a.dest: a for a in sub._actions}
    toks = []
    for key, val in cfg.items():
        act = flags.get(key.replace("-", "_"))
        if act is None:
            raise ValueError(f"config key {key!r} is not a flag of this command")
        if isinstance(act, argparse._StoreTrueAction):
            if val.lower() in ("1", "true", "yes", "on"):
                toks.append(f"--{key}")
            elif val.lower() not in ("0", "false", "no", "off"):
                raise ValueError(f"config key {key!r} takes true/false")
        else:
            toks += [f"--{key}", val]
    return toks


def _drop_option(argv: List[str], name: str) -> List[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
        elif a == name:
            skip = True
        elif not a.startswith(name + "="):
            out.append(a)
    return out


def _find_config(argv: List[str], commands) -> Optional[str]:
    """Value of a top-level ``--config`` (before the command), if any."""
    for i, a in enumerate(argv):
        if a in commands:
            return None
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    try:
        config = _find_config(argv, commands)
        if config is not None:
            cmd = next((a for a in argv if a in commands), None)
            if cmd is None:
                parser.error("a command is required")
            try:
                with open(config) as f:
                    toks = _config_tokens(parse_config(f.read(), config), commands[cmd])
            except (OSError, ValueError) as e:
                parser.error(str(e))
            i = argv.index(cmd)
            argv = _drop_option(argv[:i], "--config") + [cmd] + toks + argv[i + 1:]
        args = parser.parse_args(argv)
        if args.replay:
            try:
                with open(args.replay) as f:
                    argv = json.load(f)["argv"]
            except (OSError, ValueError, KeyError) as e:
                print(f"error: cannot replay {args.replay}: {e}", file=sys.stderr)
                return 1
            if args.replay_into:
                argv = _drop_option(argv, "--out-dir") + ["--out-dir", args.replay_into]
            args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
    except SystemExit as e:
        return int(e.code or 0)
    # the merged, config-free command line; replaying it reproduces the run
    args.argv = [a for a in argv if a not in ("-v", "--verbose")]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        if args.command == "d2od-train":
            return cmd_d2od_train(args, parser)
        if args.command == "fit" and args.kitti and not args.frame:
            parser.error("--kitti needs --frame")
        if args.command == "fit" and args.kitti and not args.region_from_labels:
            parser.error("--kitti needs a region source (--region-from-labels)")
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
