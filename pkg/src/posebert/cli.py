"""Command-line entry point: ``posebert <command> ...``.

Exit codes: 0 success, 1 runtime error, 2 configuration or usage error.
Diagnostics go to stderr; data goes to files only.
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import bnfinetune, metrics
from .config import load_config
from .errors import ConfigError, PoseBertError, SequenceMismatch
from .inference import infer_dataset, parse_mask_spec
from .mocapgen import generate_dataset, read_sequences, write_sequences
from .model import TINY, init_model
from .scene import emit_scenes
from .skeleton import default_skeleton, forward_kinematics
from .training import LOG_COLUMNS, format_log_line, load_checkpoint, save_checkpoint, train


def _info(msg):
    print(msg, file=sys.stderr)


def _config(args, overrides):
    return load_config(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    cfg = _config(args, {"generator": {"seed": args.seed, "n_sequences": args.n_sequences,
                                       "frames_per_sequence": args.frames}})
    ds = generate_dataset(cfg.generator)
    write_sequences(ds, args.out, extra_header={"config": cfg.to_dict()})
    _info(f"wrote {len(ds)} sequences, {ds.n_frames} frames at {ds.fps:g} fps to {args.out}")
    return 0


def _model_overrides(args):
    return dict(TINY) if args.tiny else {}


def cmd_train(args):
    cfg = _config(args, {
        "model": _model_overrides(args),
        "train": {"mask_ratio": args.mask_ratio, "noise_std": args.noise_std, "iterations": args.iterations,
                  "lr": args.lr, "seed": args.seed},
    })
    ds = read_sequences(args.data)
    train_set = type(ds)([s for s in ds.sequences if s.split != "val"], ds.fps, ds.provenance)
    start = 0
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        if meta["model_config"] != cfg.model.to_dict():
            raise ConfigError("model", "checkpoint model config differs from the requested one; refusing to resume")
        saved = dict(meta["train_config"] or {})
        wanted = asdict(cfg.train)
        saved.pop("iterations", None)
        wanted.pop("iterations")
        if saved != wanted:
            raise ConfigError("train", "checkpoint training config differs from the requested one; refusing to resume")
        start = int(meta["step"])
    else:
        model = init_model(cfg.model, seed=cfg.train.seed)
    log_path = args.log or str(args.out) + ".log.csv"
    with open(log_path, "w") as log:
        log.write(",".join(LOG_COLUMNS) + "\n")

        def log_fn(rec):
            log.write(format_log_line(rec) + "\n")
            log.flush()

        result = train(model, train_set, cfg.train, log_fn=log_fn, start_step=start)
    save_checkpoint(model, args.out, cfg.train, step=result.steps, extra={"config": cfg.to_dict()})
    _info(f"trained {result.steps - start} iterations; checkpoint {args.out}, log {log_path}")
    return 0


def cmd_infer(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_sequences(args.input)
    masks = None
    if args.mode == "infill":
        if args.mask_spec is None:
            raise ConfigError("--mask-spec", "infill mode needs --mask-spec")
        masks = {s.name: parse_mask_spec(args.mask_spec, s.n_frames) for s in ds.sequences}
    out = infer_dataset(model, ds, masks)
    write_sequences(out, args.out, extra_header={"inference": {
        "checkpoint": str(args.checkpoint), "mode": args.mode, "mask_spec": args.mask_spec,
        "window": model.cfg.seq_len, "stride": max(model.cfg.seq_len // 2, 1), "blend": "tent-6d"}})
    _info(f"refined {len(out)} sequences into {args.out}")
    return 0


def _joint_pairs(pred, gt):
    skel = default_skeleton()
    pmap = pred.by_name()
    gnames = [s.name for s in gt.sequences]
    missing = [n for n in gnames if n not in pmap]
    extra = sorted(set(pmap) - set(gnames))
    if missing or extra:
        raise SequenceMismatch(f"sequence ids differ: missing in predictions {missing[:5]}, "
                               f"unexpected {extra[:5]}")
    pairs = []
    for g in gt.sequences:
        p = pmap[g.name]
        if p.n_frames != g.n_frames:
            raise SequenceMismatch(f"sequence {g.name!r}: {p.n_frames} predicted frames, {g.n_frames} expected")
        pairs.append((g.name, forward_kinematics(skel, p.rotations), forward_kinematics(skel, g.rotations)))
    return pairs


def cmd_eval(args):
    gt = read_sequences(args.gt)
    report = metrics.evaluate(_joint_pairs(read_sequences(args.pred), gt), gt.fps)
    echo = {"config": {"pred": str(args.pred), "gt": str(args.gt), "compare": args.compare,
                       "bin_width": args.bin_width, "gain_metric": args.gain_metric}}
    Path(args.out).write_text(report.to_json(echo) + "\n")
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    report.write_csv(csv_path)
    _info(f"MPJPE {report.mpjpe_mm:.2f} mm, PA-MPJPE {report.pa_mpjpe_mm:.2f} mm, "
          f"accel {report.accel_err:.3f} mm/frame^2 over {report.n_frames} frames")
    if args.compare:
        base = metrics.evaluate(_joint_pairs(read_sequences(args.compare), gt), gt.fps)
        key = "per_frame_" + args.gain_metric
        hist = metrics.gain_histogram(getattr(base, key), getattr(report, key), args.bin_width)
        stem = Path(args.out).with_suffix("")
        doc = {**hist.to_dict(), **echo, "gain": f"{args.gain_metric}(compare) - {args.gain_metric}(pred)"}
        Path(str(stem) + ".gain.json").write_text(json.dumps(doc, indent=2) + "\n")
        hist.write_csv(str(stem) + ".gain.csv")
        _info(f"mean gain {hist.mean_gain:.3f} mm over {len(report.per_frame_mpjpe)} frames")
    return 0


def cmd_scene(args):
    cfg = _config(args, {"scene": {"n": args.n, "seed": args.seed, "texture_count": args.textures,
                                   "background_count": args.backgrounds}})
    ds = read_sequences(args.data)
    sc = cfg.scene
    emit_scenes(ds, sc.n, sc.texture_count, sc.background_count, sc.seed, args.out,
                extra_header={"config": asdict(sc)})
    _info(f"wrote {sc.n} scene records to {args.out}")
    return 0


def cmd_bnfinetune(args):
    cfg = _config(args, {"experiment": {"seed": args.seed, "steps": args.steps}})
    rows = bnfinetune.run_experiment(cfg.experiment)
    bnfinetune.write_results(rows, args.out, config={"experiment": asdict(cfg.experiment)})
    best = min((r for r in rows if r["selection"] == "BNOnly"), key=lambda r: r["pa_mpjpe_mm"], default=None)
    if best is not None:
        _info(f"best BNOnly: rho={best['rho']:g}, PA-MPJPE {best['pa_mpjpe_mm']:.2f} mm "
              f"(pretrained {rows[0]['pa_mpjpe_mm']:.2f} mm)")
    _info(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="posebert", description="Temporal pose denoising and infilling toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a procedural motion dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-sequences", type=int)
    g.add_argument("--frames", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model by masked modeling")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--mask-ratio", type=float)
    t.add_argument("--noise-std", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--tiny", action="store_true", help="L=2, D_t=64, 4 heads")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="denoise or infill sequences")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--mode", choices=("denoise", "infill"), default="denoise")
    i.add_argument("--mask-spec", help="masked frame indices, e.g. 3,7-9")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="MPJPE / PA-MPJPE / acceleration error report")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--csv")
    e.add_argument("--compare", help="baseline predictions for a gain histogram")
    e.add_argument("--bin-width", type=float, default=1.0)
    e.add_argument("--gain-metric", choices=("mpjpe", "pa_mpjpe"), default="mpjpe")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("scene", help="emit rendering-parameter records")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--textures", type=int)
    s.add_argument("--backgrounds", type=int)
    s.set_defaults(func=cmd_scene)

    b = sub.add_parser("bnfinetune", help="batch-norm fine-tuning experiment")
    b.add_argument("--config")
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--steps", type=int)
    b.set_defaults(func=cmd_bnfinetune)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _info(f"config error: {exc}")
        return 2
    except (PoseBertError, OSError, ValueError) as exc:
        _info(f"error: {type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
