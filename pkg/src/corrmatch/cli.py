"""Command-line front end wiring the generator, trainer, matcher, and metrics.

Subcommands: gen-data, train, match, dense, eval, gradcheck, ablate. Every
run is reproducible: the same flags and seeds produce byte-identical
artifacts. Exit codes: 0 success, 1 domain failure (no covisible content,
malformed files, diverged training), 2 usage errors. Set CORRMATCH_LOG to
"debug" or "quiet" to change verbosity.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .experiments import (
    coarse_aepe,
    filter_rates,
    held_out_pairs,
    zoom_error_medians,
)
from .flowio import (
    FileFormatError,
    read_correspondences,
    read_flo,
    read_image,
    write_correspondences,
    write_flo,
    write_image,
)
from .inference import (
    DensificationError,
    InferenceConfig,
    ZoomSchedule,
    dense_flow,
    estimates_to_records,
    match_sparse,
)
from .metrics import MetricError, aepe, fl_ratio, pck
from .model import ModelConfig, init_params, make_matcher
from .synth import (
    SceneOptions,
    ground_truth_flow,
    render_pair,
    sample_scene_spec,
    scene_options_to_text,
)
from .training import (
    Checkpoint,
    CheckpointError,
    TrainingDivergedError,
    TrainingPlan,
    load_checkpoint,
    run_staged_training,
    save_checkpoint,
)

LOG_LEVEL = os.environ.get("CORRMATCH_LOG", "info")


def _log(msg):
    if LOG_LEVEL != "quiet":
        print(msg)


def _debug(msg):
    if LOG_LEVEL == "debug":
        print(msg, file=sys.stderr)


class DomainError(RuntimeError):
    """Anything that should end the process with exit code 1."""


# -- argument plumbing -----------------------------------------------------------


def _add_model_flags(p):
    p.add_argument("--size", type=int, default=128,
                   help="square model input edge (multiple of 16)")
    p.add_argument("--d-model", type=int, default=64, help="channel width")
    p.add_argument("--enc-layers", type=int, default=3, help="encoder depth")
    p.add_argument("--dec-layers", type=int, default=3, help="decoder depth")
    p.add_argument("--heads", type=int, default=4, help="attention heads")
    p.add_argument("--head-hidden", type=int, default=128,
                   help="regressor MLP width")
    p.add_argument("--pos-enc", choices=("linear", "loglinear"),
                   default="linear", help="positional encoding schedule")
    p.add_argument("--variant", choices=("transformer", "mlp"),
                   default="transformer", help="network variant")


def _model_config(args):
    return ModelConfig(input_size=args.size, d_model=args.d_model,
                       enc_layers=args.enc_layers, dec_layers=args.dec_layers,
                       heads=args.heads, head_hidden=args.head_hidden,
                       pos_enc_mode=args.pos_enc, variant=args.variant)


def _add_scene_flags(p):
    p.add_argument("--layers", type=int, default=1,
                   help="scene layers (2+ makes discontinuous motion)")
    p.add_argument("--translation", type=float, default=0.10,
                   help="background translation amplitude")
    p.add_argument("--fg-translation", type=float, default=0.16,
                   help="foreground translation amplitude")
    p.add_argument("--corner-jitter", type=float, default=0.06,
                   help="homography corner jitter")
    p.add_argument("--photometric", type=float, default=0.08,
                   help="brightness/contrast jitter on view two")


def _scene_options(args):
    return SceneOptions(n_layers=args.layers, translation=args.translation,
                        fg_translation=args.fg_translation,
                        corner_jitter=args.corner_jitter,
                        photometric=args.photometric)


def _add_inference_flags(p):
    p.add_argument("--zoom-factor", type=float, default=2.0,
                   help="crop shrink per zoom step")
    p.add_argument("--zoom-steps", type=int, default=4, help="zoom-in steps")
    p.add_argument("--tau-visible", type=float, default=5.0,
                   help="covisibility cycle threshold, px at 256 edge")
    p.add_argument("--tau-cycle", type=float, default=5.0,
                   help="match cycle threshold, px at 256 edge")
    p.add_argument("--tau-std", type=float, default=0.02,
                   help="oscillation threshold, fraction of long edge")
    p.add_argument("--covis-grid", type=int, default=32,
                   help="covisibility grid resolution")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-query refinement")


def _inference_config(args, model_size):
    return InferenceConfig(model_size=model_size,
                           tau_visible=args.tau_visible,
                           tau_cycle=args.tau_cycle,
                           tau_std=args.tau_std,
                           covis_grid=args.covis_grid,
                           zoom=ZoomSchedule(factor=args.zoom_factor,
                                             steps=args.zoom_steps))


def _apply_config_file(argv, parser):
    """key=value config file; explicit flags override its values."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        parser.error("--config needs a path")
    path = Path(argv[i + 1])
    if not path.exists():
        parser.error(f"config file {path} does not exist")
    defaults = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            parser.error(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        defaults[key.replace("-", "_")] = val
    for sub in parser._subparsers._group_actions[0].choices.values():
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: _coerce_default(sub, k, v)
                            for k, v in defaults.items() if k in known})
    return argv[:i] + argv[i + 2:]


def _coerce_default(subparser, dest, value):
    for a in subparser._actions:
        if a.dest == dest and a.type is not None:
            return a.type(value)
    return value


def build_parser():
    parser = argparse.ArgumentParser(
        prog="corrmatch",
        description="Functional image correspondence: train, match, evaluate.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--config", metavar="FILE",
                        help="key=value defaults file; flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a seeded synthetic corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairs", type=int, default=8, help="number of pairs")
    p.add_argument("--seed", type=int, default=0, help="base scene seed")
    p.add_argument("--render-size", type=int, default=128,
                   help="rendered image edge")
    p.add_argument("--no-flow", action="store_true",
                   help="skip ground-truth .flo files")
    _add_scene_flags(p)

    p = sub.add_parser("train", help="staged training to a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--scenes", type=int, default=2000, help="corpus scenes")
    p.add_argument("--stage-steps", default="2000,10000,2000",
                   help="steps per stage, comma separated")
    p.add_argument("--stage-lrs", default="1e-4,1e-5,1e-5",
                   help="learning rate per stage")
    p.add_argument("--batch", type=int, default=8, help="batch size")
    p.add_argument("--corr-per-pair", type=int, default=100,
                   help="correspondences sampled per crop pair")
    p.add_argument("--log-file", default=None, help="progress log path")
    p.add_argument("--log-every", type=int, default=50,
                   help="steps between progress lines")
    _add_model_flags(p)
    _add_scene_flags(p)

    p = sub.add_parser("match", help="sparse correspondences for an image pair",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--image-a", required=True, help="first image (PPM/PGM)")
    p.add_argument("--image-b", required=True, help="second image (PPM/PGM)")
    p.add_argument("--out", required=True, help="matches text file")
    p.add_argument("--grid", type=int, default=16,
                   help="query grid resolution (ignored with --random)")
    p.add_argument("--random", type=int, default=0,
                   help="use N random queries instead of a grid")
    p.add_argument("--seed", type=int, default=0, help="query sampling seed")
    _add_inference_flags(p)

    p = sub.add_parser("dense", help="dense flow via match + densify",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--image-a", required=True, help="first image (PPM/PGM)")
    p.add_argument("--image-b", required=True, help="second image (PPM/PGM)")
    p.add_argument("--out", required=True, help="output .flo path")
    p.add_argument("--grid", type=int, default=24, help="query grid for interp mode")
    p.add_argument("--mode", choices=("interp", "all"), default="interp",
                   help="densify sparse matches or query every pixel")
    _add_inference_flags(p)

    p = sub.add_parser("eval", help="compare two flow fields",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--pred", required=True, help="predicted .flo")
    p.add_argument("--gt", required=True, help="ground-truth .flo")
    p.add_argument("--pck-px", default="1,3,5",
                   help="PCK thresholds in px, comma separated")
    p.add_argument("--fl-rule", choices=("kitti", "epe3"), default="kitti",
                   help="outlier rule: >3px and >5%% of magnitude, or >3px only")

    p = sub.add_parser("gradcheck", help="run the gradient oracle suite",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--tol", type=float, default=1e-4, help="relative tolerance")
    p.add_argument("--shapes", type=int, default=10, help="shapes per primitive")
    p.add_argument("--samples", type=int, default=5,
                   help="sampled parameters for the full-model check")

    p = sub.add_parser("ablate", help="attention-vs-MLP and zoom studies",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="report text file")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--scenes", type=int, default=60, help="training scenes")
    p.add_argument("--eval-scenes", type=int, default=12, help="held-out scenes")
    p.add_argument("--stage-steps", default="200,600,200",
                   help="steps per stage for both variants")
    p.add_argument("--batch", type=int, default=4, help="batch size")
    _add_model_flags(p)
    _add_scene_flags(p)
    return parser


# -- subcommand bodies -------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    options = _scene_options(args)
    for i in range(args.pairs):
        seed = args.seed + i
        pair = render_pair(sample_scene_spec(seed, options), args.render_size)
        stem = out / f"pair_{i:04d}"
        write_image(pair.image_a, f"{stem}_a.ppm")
        write_image(pair.image_b, f"{stem}_b.ppm")
        (out / f"scene_{i:04d}.txt").write_text(
            scene_options_to_text(options, seed=seed))
        if not args.no_flow:
            write_flo(ground_truth_flow(pair.gt, args.render_size),
                      f"{stem}_gt.flo")
        _debug(f"rendered pair {i} (seed {seed})")
    _log(f"wrote {args.pairs} pairs to {out}")
    return 0


def _parse_stage_list(text, n=3, cast=float):
    parts = [cast(s) for s in text.split(",")]
    if len(parts) != n:
        raise DomainError(f"expected {n} comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_train(args):
    config = _model_config(args)
    plan = TrainingPlan(
        stage_steps=_parse_stage_list(args.stage_steps, cast=int),
        stage_lrs=_parse_stage_list(args.stage_lrs, cast=float),
        batch_size=args.batch,
        seed=args.seed,
        n_scenes=args.scenes,
        scene_options=_scene_options(args),
        n_corr=args.corr_per_pair,
        log_every=args.log_every,
    )
    stream = open(args.log_file, "w") if args.log_file else None
    try:
        ckpt = run_staged_training(config, plan, log_stream=stream,
                                   echo=LOG_LEVEL != "quiet")
    finally:
        if stream:
            stream.close()
    save_checkpoint(ckpt, args.out)
    _log(f"saved checkpoint to {args.out} (step {ckpt.step})")
    return 0


def _load_matcher(args):
    ckpt = load_checkpoint(args.ckpt)
    return make_matcher(ckpt.param_tensors(), ckpt.config), ckpt.config


def _queries_for(args, img):
    h, w = img.shape[:2]
    if args.random > 0:
        rng = np.random.default_rng(args.seed)
        return rng.uniform([0, 0], [w, h], size=(args.random, 2))
    g = args.grid
    u = (np.arange(g) + 0.5) / g
    gx, gy = np.meshgrid(u * w, u * h)
    return np.stack([gx, gy], axis=-1).reshape(-1, 2)


def cmd_match(args):
    matcher, config = _load_matcher(args)
    img_a = read_image(args.image_a)
    img_b = read_image(args.image_b)
    icfg = _inference_config(args, config.input_size)
    queries = _queries_for(args, img_a)
    estimates = match_sparse(queries, img_a, img_b, matcher, icfg,
                             threads=args.threads)
    if all(e.rejection_reason == "no_covisibility" for e in estimates):
        raise DomainError("no_covisibility: the images share no matchable content")
    records = estimates_to_records(estimates)
    write_correspondences(records, args.out)
    n_rej = sum(not e.accepted for e in estimates)
    _log(f"accepted={len(records)} rejected={n_rej} -> {args.out}")
    return 0


def cmd_dense(args):
    matcher, config = _load_matcher(args)
    img_a = read_image(args.image_a)
    img_b = read_image(args.image_b)
    icfg = _inference_config(args, config.input_size)
    field = dense_flow(img_a, img_b, matcher, icfg, grid=args.grid,
                       mode=args.mode, threads=args.threads)
    write_flo(field, args.out)
    _log(f"wrote {field.width}x{field.height} flow "
         f"({field.valid.mean():.1%} valid) -> {args.out}")
    return 0


def cmd_eval(args):
    pred = read_flo(args.pred)
    gt = read_flo(args.gt)
    print(f"aepe={aepe(pred, gt):.6g}")
    for t in (float(s) for s in args.pck_px.split(",") if s):
        print(f"pck{t:g}={pck(pred, gt, t):.6g}")
    print(f"fl={fl_ratio(pred, gt, magnitude_relative=args.fl_rule == 'kitti'):.6g}")
    return 0


def cmd_gradcheck(args):
    n_pass, n_fail = T.run_gradcheck(tol=args.tol, shapes_per_op=args.shapes,
                                     report=print)
    from .model import ModelConfig as MC
    from .training import loss_graph
    from .tensor import Tensor, check_gradient_sampled, add as t_add

    cfg = MC(input_size=32, d_model=8, enc_layers=1, dec_layers=1, heads=2,
             head_hidden=8)
    params = init_params(cfg, seed=1, dtype=np.float64)
    rng = np.random.default_rng(1)
    img_a = rng.uniform(0, 1, size=(1, 32, 32, 3))
    img_b = rng.uniform(0, 1, size=(1, 32, 32, 3))
    q = rng.uniform(0.2, 0.8, size=(1, 4, 2))
    t = rng.uniform(0.2, 0.8, size=(1, 4, 2))

    def loss_of(p):
        corr, cycle = loss_graph(q, t, Tensor(img_a), Tensor(img_b), p, cfg)
        return t_add(corr, cycle)

    err, _ = check_gradient_sampled(loss_of, params, n_samples=args.samples,
                                    seed=7)
    ok = err <= args.tol
    print(f"{'PASS' if ok else 'FAIL'} full_model_loss: "
          f"max relative error {err:.3e}")
    return 0 if (n_fail == 0 and ok) else 1


def cmd_ablate(args):
    from .training import TrainingPlan as Plan

    out_lines = []

    def emit(line):
        out_lines.append(line)
        _log(line)

    base = _model_config(args)
    scene = _scene_options(args)
    if scene.n_layers < 2:
        scene = SceneOptions(n_layers=2, translation=scene.translation,
                             fg_translation=scene.fg_translation,
                             corner_jitter=scene.corner_jitter,
                             photometric=scene.photometric)
    steps = _parse_stage_list(args.stage_steps, cast=int)
    plan = Plan(stage_steps=steps, stage_lrs=(1e-4, 1e-5, 1e-5),
                batch_size=args.batch, seed=args.seed, n_scenes=args.scenes,
                scene_options=scene, n_corr=50, log_every=200)
    eval_seeds = range(args.seed + 900_000, args.seed + 900_000 + args.eval_scenes)
    pairs = held_out_pairs(eval_seeds, scene, base.input_size)

    emit("variant comparison on discontinuous-motion corpus")
    results = {}
    for variant in ("transformer", "mlp"):
        cfg = ModelConfig(**{**base.to_dict(), "variant": variant})
        ckpt = run_staged_training(cfg, plan, echo=False)
        matcher = make_matcher(ckpt.param_tensors(), cfg)
        results[variant] = coarse_aepe(matcher, pairs)
        emit(f"  {variant}: coarse_aepe_px={results[variant]:.3f}")
    emit(f"transformer_better={results['transformer'] < results['mlp']}")

    emit("zoom error study (transformer variant)")
    cfg = ModelConfig(**{**base.to_dict(), "variant": "transformer"})
    ckpt = run_staged_training(cfg, plan, echo=False)
    matcher = make_matcher(ckpt.param_tensors(), cfg)
    icfg = InferenceConfig(model_size=cfg.input_size)
    medians = zoom_error_medians(matcher, pairs, icfg, n_queries=20,
                                 seed=args.seed)
    for step, med in enumerate(medians):
        emit(f"  zoom_step_{step}_median_epe_px={med:.3f}")

    Path(args.out).write_text("\n".join(out_lines) + "\n")
    _log(f"report -> {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "match": cmd_match,
    "dense": cmd_dense,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_file(argv, parser)
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (DomainError, FileFormatError, CheckpointError, MetricError,
            DensificationError, TrainingDivergedError, FileNotFoundError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
