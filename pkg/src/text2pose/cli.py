"""Command-line entry point: ``text2pose <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import clop as C
from . import curation, diffusion, metrics, synth, vae as V, workflow
from .config import ConfigError, RunConfig, RunManifest, write_atomic, write_json
from .dit import ForwardError, StateError
from .pose import (FrameDims, PoseFormatError, PoseLengthError, load_pose_sequence, normalize_coordinates,
                   render_pose_frames, save_pose_sequence)
from .tensor import CheckpointError, OptimizerError, ShapeError
from .text import batch_caption_features

log = logging.getLogger("text2pose")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
DATA_ERRORS = (workflow.DataError, PoseFormatError, PoseLengthError, CheckpointError, C.TokenizerError,
               curation.SignalMissingError, ShapeError, FileNotFoundError, json.JSONDecodeError)
NUMERIC_ERRORS = (V.LossError, V.TrainingError, diffusion.LossError, ForwardError, OptimizerError,
                  ArithmeticError)
CONFIG_ERRORS = (ConfigError, V.ConfigurationError, diffusion.ConfigurationError, StateError)


class Run:
    """Run directory bookkeeping: config echo at start, manifest at the end."""

    def __init__(self, command: str, cfg: RunConfig, run_dir: str | None):
        self.cfg = cfg
        self.dir = Path(run_dir) if run_dir else Path(cfg["out_dir"]) / command
        self.dir.mkdir(parents=True, exist_ok=True)
        write_atomic(self.dir / "config.txt", cfg.dump())
        self.manifest = RunManifest(command, cfg.digest(), cfg["seed"])

    def finish(self):
        self.manifest.finish(self.dir)


def _dims(cfg: RunConfig) -> FrameDims:
    return FrameDims(cfg["frame_width"], cfg["frame_height"])


def cmd_synth_data(args, cfg):
    run = Run("synth-data", cfg, args.run_dir)
    seed = cfg["seed"]
    if args.classes > 0:
        poses, captions, _ = synth.class_corpus(args.classes, args.n, seed, cfg["frames"])
    else:
        poses, captions = synth.attribute_corpus(args.n, seed, cfg["frames"])
    manifest = synth.write_corpus(args.out, poses, captions, seed)
    run.manifest.metrics = {"clips": len(captions)}
    run.manifest.checkpoints = {"manifest": str(manifest)}
    run.finish()
    print(manifest)


def cmd_curate(args, cfg):
    run = Run("curate", cfg, args.run_dir)
    scorer = None
    if args.clop:
        model, vocab = C.load_clop(args.clop)

        def scorer(caption, seq, dims):
            h_e = C.embed_text(model, vocab, C.TextInput(caption))
            return h_e, C.embed_pose(model, normalize_coordinates(seq, dims))
    report = curation.run_pipeline(args.input, args.out, cfg.build("curation"), scorer, args.kept_only)
    write_json(run.dir / "report.json", report.to_json())
    run.manifest.metrics = report.to_json()
    run.finish()
    print(json.dumps({"kept": report.kept, "total": report.total}))


def cmd_train_vae(args, cfg):
    run = Run("train-vae", cfg, args.run_dir)
    poses, _, _ = workflow.load_dataset(args.manifest, cfg["frames"])
    model, history = V.train_vae(poses, cfg.build("vae"))
    V.save_vae(model, args.out)
    recon = V.reconstruct(model, torch.as_tensor(poses), use_skips=False)
    report = {"final_loss": history[-1]["loss"], "recon_mse": float(((recon - torch.as_tensor(poses)) ** 2).mean())}
    write_json(run.dir / "report.json", report)
    run.manifest.checkpoints = {"vae": str(args.out)}
    run.manifest.metrics = report
    run.finish()


def cmd_train_clop(args, cfg):
    run = Run("train-clop", cfg, args.run_dir)
    poses, captions, _ = workflow.load_dataset(args.manifest, cfg["frames"])
    model, vocab, history = C.train_clop(poses, captions, cfg.build("clop"))
    C.save_clop(model, vocab, args.out)
    fp = workflow.pose_embeddings(model, poses, normalize=True)
    ft = workflow.text_embeddings(model, vocab, captions)
    pool = min(cfg["eval.pool_size"], len(captions))
    top = metrics.r_precision(fp, ft, pool, cfg["seed"])
    report = {"final_loss": history[-1]["loss"], "rp_top1": top[0], "rp_top2": top[1], "rp_top3": top[2]}
    write_json(run.dir / "report.json", report)
    run.manifest.checkpoints = {"clop": str(args.out)}
    run.manifest.metrics = report
    run.finish()


def cmd_train_dit(args, cfg):
    run = Run("train-dit", cfg, args.run_dir)
    dcfg = cfg.build("diffusion")
    poses, captions, _ = workflow.load_dataset(args.manifest, cfg["frames"])
    vae = V.load_vae(args.vae)
    latents = workflow.encode_latents(vae, poses)
    stats = diffusion.latent_stats(latents)
    h_p = None
    if dcfg.lambda_f > 0:
        if not args.clop:
            raise diffusion.ConfigurationError("diffusion.lambda_f > 0 needs --clop (eval checkpoint)")
        clop_model, _ = C.load_clop(args.clop)
        if clop_model.config.tag != "eval":
            raise diffusion.ConfigurationError("LAMA needs the CLoP checkpoint tagged 'eval'")
        dcfg.dit.clop_dim = clop_model.config.embed_dim
        h_p = workflow.pose_embeddings(clop_model, poses)
    model, history = diffusion.train_dit(stats.normalize(latents), batch_caption_features(captions), dcfg, h_p)
    diffusion.save_pipeline(args.out, model, dcfg, stats)
    report = {"final_loss": history[-1]["loss"], "final_l_d": history[-1]["l_d"],
              "final_l_f": history[-1]["l_f"]}
    write_json(run.dir / "report.json", report)
    run.manifest.checkpoints = {"dit": str(args.out)}
    run.manifest.metrics = report
    run.finish()


def _pipeline(args, cfg):
    for flag in ("dit", "vae"):
        if not getattr(args, flag) or not Path(getattr(args, flag)).exists():
            raise ConfigError(f"--{flag} checkpoint missing")
    pipe = diffusion.load_pipeline(args.dit, V.load_vae(args.vae))
    pipe.frames = cfg["frames"]
    # sampling knobs set for this run win over the values saved at training time
    for key in ("sample_steps", "guidance_scale"):
        if f"diffusion.{key}" in cfg.explicit:
            setattr(pipe.config, key, cfg[f"diffusion.{key}"])
    return pipe


def cmd_sample(args, cfg):
    run = Run("sample", cfg, args.run_dir)
    pipe = _pipeline(args, cfg)
    dims = _dims(cfg)
    if args.captions_file:
        captions = [c.strip() for c in Path(args.captions_file).read_text().splitlines() if c.strip()]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        records = []
        for i, caption in enumerate(captions):
            seq = pipe.sample(caption, args.seed + i, args.steps)
            path = out / f"sample_{i:04d}.mvp"
            save_pose_sequence(workflow.pixel_sequence(seq.data, dims), path)
            records.append({"id": f"sample_{i:04d}", "caption": caption, "pose_path": path.name,
                            "frame_width": dims.width, "frame_height": dims.height})
        curation.write_jsonl_atomic(out / "manifest.jsonl", records)
    else:
        if not args.caption:
            raise ConfigError("give --caption or --captions-file")
        seq = pipe.sample(args.caption, args.seed, args.steps)
        save_pose_sequence(workflow.pixel_sequence(seq.data, dims), args.out)
    run.manifest.checkpoints = {"dit": args.dit, "vae": args.vae}
    run.finish()


def cmd_predict_sequence(args, cfg):
    run = Run("predict-sequence", cfg, args.run_dir)
    pipe = _pipeline(args, cfg)
    dims = _dims(cfg)
    try:
        frames = [int(i) for i in args.mask.split(",") if i.strip()]
    except ValueError as exc:
        raise ConfigError(f"--mask must be comma-separated frame indices: {exc}") from exc
    known = normalize_coordinates(load_pose_sequence(args.known), dims)
    if known.frames != pipe.frames or any(not 0 <= i < pipe.frames for i in frames):
        raise workflow.DataError(f"known sequence must have {pipe.frames} frames and mask indices inside it")
    seq = pipe.inpaint_sample(args.caption, known, frames, args.seed, args.steps)
    save_pose_sequence(workflow.pixel_sequence(seq.data, dims), args.out)
    run.manifest.checkpoints = {"dit": args.dit, "vae": args.vae}
    run.finish()


def cmd_embed(args, cfg):
    run = Run("embed", cfg, args.run_dir)
    model, vocab = C.load_clop(args.clop)
    poses, captions, _ = workflow.load_dataset(args.manifest, cfg["frames"], kept_only=False)
    ids = list(range(len(captions)))
    if args.poses_out:
        C.save_embeddings(args.poses_out, ids, workflow.pose_embeddings(model, poses, args.normalize))
    if args.texts_out:
        C.save_embeddings(args.texts_out, ids, workflow.text_embeddings(model, vocab, captions, args.normalize))
    run.finish()


def cmd_evaluate(args, cfg):
    run = Run("evaluate", cfg, args.run_dir)
    _, gt = C.load_embeddings(args.gt)
    _, pred = C.load_embeddings(args.pred)
    _, texts = C.load_embeddings(args.texts)
    per_text = None
    if args.mm:
        ids, mm = C.load_embeddings(args.mm)
        ids = np.asarray(ids)
        per_text = [mm[ids == i] for i in sorted(set(ids.tolist()))]
    report = metrics.evaluate(gt, pred, texts, cfg["eval.pool_size"], cfg["eval.s_dis"], cfg["seed"], per_text)
    report["config"] = cfg.values
    write_json(args.report, report)
    run.manifest.metrics = {k: v for k, v in report.items() if k != "config"}
    run.finish()
    print(json.dumps(run.manifest.metrics))


def cmd_render(args, cfg):
    dims = FrameDims(args.width or cfg["frame_width"], args.height or cfg["frame_height"])
    seq = normalize_coordinates(load_pose_sequence(args.pose), dims)
    paths = render_pose_frames(seq, dims, args.out)
    print(f"{len(paths)} frames -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="text2pose", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--run-dir", help="where config echo, report and manifest go")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic toy corpus")
    p.add_argument("--classes", type=int, default=2, help="0 = attribute corpus with distinct captions")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("curate", parents=[common], help="run the clip filters over a manifest")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clop", help="CLoP checkpoint for caption similarity when the manifest has no score")
    p.add_argument("--kept-only", action="store_true")
    p.set_defaults(fn=cmd_curate)

    for name, fn in (("train-vae", cmd_train_vae), ("train-clop", cmd_train_clop)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("train-dit", parents=[common])
    p.add_argument("--manifest", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--clop")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_dit)

    for name, fn in (("sample", cmd_sample), ("predict-sequence", cmd_predict_sequence)):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--dit", required=True)
        p.add_argument("--vae", required=True)
        p.add_argument("--caption")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, default=None, help="sampling steps (default diffusion.sample_steps)")
        p.add_argument("--out", required=True)
        p.set_defaults(fn=fn)
        if name == "sample":
            p.add_argument("--captions-file", help="one caption per line; --out becomes a directory")
        else:
            p.add_argument("--known", required=True)
            p.add_argument("--mask", required=True, help="known frame indices, e.g. 0,63")

    p = sub.add_parser("embed", parents=[common], help="CLoP features of a manifest's poses and captions")
    p.add_argument("--clop", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--poses-out")
    p.add_argument("--texts-out")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--mm", help="per-text sample features; row id = text index")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("render", parents=[common])
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=float)
    p.add_argument("--height", type=float)
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = RunConfig.from_file(args.config, args.set)
        args.fn(args, cfg)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
