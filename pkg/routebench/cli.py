"""
routebench command line: gen-data, train, eval, sweep and render.

Exit codes: 0 success, 2 usage or I/O problem, 3 non-finite training loss.
"""

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

from logger.logger import logger, set_verbosity
from routebench import config as cfg
from routebench import render
from routebench.data import Dataset, dataset_build
from routebench.routegan import NonFiniteLossError, RouteGanModel, q_reconstruction, sample_rollouts, train
from routebench.scene import Case, Scene, load_scene, make_scene, sample_scenario
from routebench.sim import dump_rollouts, evaluate_table, latent_sweep, sweep_values

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _scenes(config: dict, model: Optional[RouteGanModel] = None, kinds: Optional[List[str]] = None) -> List[Scene]:
    width, height = (model.config.width_px, model.config.height_px) if model else \
        (config["routegan.width_px"], config["routegan.height_px"])
    return [make_scene(kind, width, height, cfg.scene_params(config)) for kind in (kinds or config["scene.kinds"])]


def _out_dir(args, command: str) -> str:
    directory = args.out or os.path.join(cfg.output_root(), command)
    os.makedirs(directory, exist_ok=True)
    return directory


def _resolve(args, overrides: dict) -> dict:
    overrides = dict(overrides)
    overrides.update({"seed": args.seed, "workers": args.workers})
    return cfg.load_config(args.config, overrides)


############################################################################################
#                                                                                          #
#                                         COMMANDS                                         #
#                                                                                          #
############################################################################################

def cmd_gen_data(args) -> int:
    config = _resolve(args, {"data.n_safe": args.safe, "data.n_critical": args.critical})
    out = _out_dir(args, "dataset")
    mix = cfg.section(config, "data.mix")
    dataset = dataset_build(_scenes(config), config["data.n_safe"], config["data.n_critical"],
                            np.random.default_rng(config["seed"]), s=config["routegan.s"], m=config["routegan.m"],
                            dt=config["routegan.dt"], r=config["data.r"], margin=config["data.margin"],
                            max_deform=config["data.max_deform"], critical_mix=mix, verbose=not args.quiet)
    dataset.save(out)
    cfg.write_resolved(config, out)
    print(json.dumps(dataset.counts(), sort_keys=True))
    return EXIT_OK


def _check_dataset(dataset: Dataset, model: RouteGanModel) -> None:
    for key in ("s", "m", "dt"):
        if key in dataset.config and dataset.config[key] != getattr(model.config, key):
            raise ValueError(f"Dataset was built with {key}={dataset.config[key]}, "
                             f"model expects {getattr(model.config, key)}")


def cmd_train(args) -> int:
    config = _resolve(args, {"routegan.steps": args.steps, "routegan.alpha": args.alpha,
                             "routegan.lambda1": args.lambda1, "routegan.lambda2": args.lambda2,
                             "routegan.batch_size": args.batch_size, "routegan.lr": args.lr,
                             "train.preview_every": args.preview_every})
    out = _out_dir(args, "train")
    dataset = Dataset.load(args.data)
    model = RouteGanModel.create(cfg.routegan_config(config), seed=config["seed"])
    _check_dataset(dataset, model)
    cfg.write_resolved(config, out)
    checkpoint = os.path.join(out, "checkpoint.json")
    metrics_path = os.path.join(out, "metrics.csv")

    preview_scene = next(iter(dataset.scenes.values()))
    preview = sample_scenario(preview_scene, Case.III, np.random.default_rng(config["seed"]),
                              dt=model.config.dt, steps=model.config.m * model.config.s)

    def save_preview(step: int, model: RouteGanModel) -> None:
        keypoints = sample_rollouts(model, preview, preview_scene, (-2.0, 0.0, 2.0), np.random.default_rng(0))
        for q1, kw in keypoints.items():
            svg = render.render_episode(kw.points, preview.v2_reference.positions, preview_scene, s=1,
                                        title=f"step {step} q1={q1:g}")
            render.write_svg(os.path.join(out, f"preview_step{step}_q{q1:g}.svg"), svg)

    every = config["train.preview_every"]
    try:
        model, metrics = train(model, dataset, np.random.default_rng(config["seed"]), log_every=None,
                               callback=save_preview if every else None, callback_every=every,
                               verbose=not args.quiet)
    except NonFiniteLossError as ex:
        ex.metrics.to_csv(metrics_path, index=False)
        model.save(checkpoint, config, {"failed_step": ex.step})
        logger.error(f"{ex}; last finite parameters saved to {checkpoint}")
        return EXIT_NUMERIC
    metrics.to_csv(metrics_path, index=False)
    digest = model.save(checkpoint, config, {"steps": len(metrics)})
    if len(metrics) and not args.quiet:
        reconstruction = q_reconstruction(model, dataset, np.random.default_rng(config["seed"] + 1))
        logger.info(f"Style reconstruction on training conditions: "
                    f"Spearman(q1, q1_hat) = {reconstruction.attrs['spearman_q1']:.3f}")
    print(digest)
    return EXIT_OK


def _load_model(path: str) -> RouteGanModel:
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    model, _ = RouteGanModel.load(path)
    return model


def cmd_eval(args) -> int:
    config = _resolve(args, {"eval.episodes": args.episodes,
                             "eval.planners": args.planners.split(",") if args.planners else None,
                             "eval.seeds": [int(v) for v in args.seeds.split(",")] if args.seeds else None})
    model = _load_model(args.checkpoint)
    out = _out_dir(args, "eval")
    cfg.write_resolved(config, out)
    before = model.hash
    report = evaluate_table(model, {name: name for name in config["eval.planners"]},
                            _scenes(config, model), q_values=config["eval.q_values"],
                            n_episodes=config["eval.episodes"], seeds=config["eval.seeds"],
                            T_max=config["eval.t_max"], r=config["data.r"], workers=config["workers"],
                            planner_config=config, verbose=not args.quiet)
    if model.hash != before:
        raise RuntimeError("Evaluation modified the model parameters")
    report.to_csv(os.path.join(out, "report.csv"))
    report.to_json(os.path.join(out, "report.json"))
    print(report.to_frame().to_string(float_format=lambda v: f"{v:.3f}"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _resolve(args, {"sweep.dims": args.dims, "sweep.joint": True if args.joint else None,
                             "sweep.scene": args.scene, "sweep.case": args.case})
    model = _load_model(args.checkpoint)
    out = _out_dir(args, "sweep")
    cfg.write_resolved(config, out)
    scene = _scenes(config, model, [config["sweep.scene"]])[0]
    rng = np.random.default_rng(config["seed"])
    scenario = sample_scenario(scene, Case(config["sweep.case"]), rng, dt=model.config.dt,
                               steps=config["sweep.t_max"], seed=config["seed"])
    z, z2 = (rng.standard_normal(model.config.z_dim) for _ in range(2))
    i, j = (int(d) - 1 for d in config["sweep.dims"])
    values = sweep_values(config["sweep.low"], config["sweep.high"], config["sweep.step"])
    grid = latent_sweep(model, scenario, scene, (i, j), values, z, config["sweep.joint"], z2,
                        config["sweep.t_max"], config["data.r"])
    s = model.config.s
    for result in grid.cells.values():
        render.write_svg(os.path.join(out, f"{result.name}.svg"),
                         render.render_episode(result.x1.positions, result.x2.positions, scene, s, result.name))
    labels = (f"q{i + 1}", f"v2_q{j + 1}" if grid.joint else f"q{j + 1}")
    composite = render.render_grid({k: (r.x1.positions, r.x2.positions) for k, r in grid.cells.items()}, values,
                                   scene, s, labels)
    render.write_svg(os.path.join(out, "grid.svg"), composite)
    dump_rollouts(list(grid.cells.values()), os.path.join(out, "rollouts.jsonl"), scene.scene_id, s)
    logger.info(f"{len(grid)} sweep cells written to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    records = render.read_records(args.episodes)
    if args.line is not None:
        if not 1 <= args.line <= len(records):
            raise ValueError(f"--line {args.line} out of range, file has {len(records)} records")
        selected = [(args.line, records[args.line - 1])]
    else:
        selected = list(enumerate(records, start=1))
    scene = load_scene(args.scene) if args.scene else None
    out = _out_dir(args, "render")
    for number, record in selected:
        title = record.get("name") or f"{record.get('label', '')} {record.get('scene_id', '')}".strip()
        svg = render.render_episode(record["x1"], record["x2"], scene, record.get("stride") or args.stride, title)
        render.write_svg(os.path.join(out, f"episode_{number:04d}.svg"), svg)
    logger.info(f"{len(selected)} episodes rendered to {out}")
    return EXIT_OK


############################################################################################
#                                                                                          #
#                                          PARSER                                          #
#                                                                                          #
############################################################################################

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="Root seed (default 0)")
    common.add_argument("--out", help=f"Output directory (default ${cfg.OUTPUT_ROOT_VAR}/<command> or ./runs)")
    common.add_argument("--workers", type=int, help="Parallel rollout workers")
    common.add_argument("--debug", action="store_true", help="Log at DEBUG level")
    common.add_argument("--quiet", action="store_true", help="Log warnings and errors only")

    parser = argparse.ArgumentParser(prog="routebench",
                                     description="Style-controlled adversarial route generation and planner testing")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("gen-data", parents=[common], help="Build the labeled interaction dataset")
    p.add_argument("--safe", type=int, help="Number of SAFE episodes")
    p.add_argument("--critical", type=int, help="Number of CRITICAL episodes")
    p.set_defaults(handler=cmd_gen_data)

    p = commands.add_parser("train", parents=[common], help="Train RouteGAN on a dataset")
    p.add_argument("--data", required=True, help="Dataset directory written by gen-data")
    p.add_argument("--steps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--preview-every", type=int, help="Write sample rollout SVGs every N steps")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", parents=[common], help="Collision rates of tested planners against RouteGAN")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="Episodes per seed and cell")
    p.add_argument("--planners", help="Comma-separated planner kinds (data,idm,astar)")
    p.add_argument("--seeds", help="Comma-separated seeds")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("sweep", parents=[common], help="Latent-space sweep over two style dimensions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dims", type=int, nargs=2, help="Two 1-based style dimensions")
    p.add_argument("--joint", action="store_true", help="Both vehicles on RouteGAN")
    p.add_argument("--scene", help="Scene kind")
    p.add_argument("--case", choices=[c.value for c in Case])
    p.set_defaults(handler=cmd_sweep)

    p = commands.add_parser("render", parents=[common], help="SVG of episode records")
    p.add_argument("--episodes", required=True, help="JSON Lines file of episodes")
    p.add_argument("--line", type=int, help="Render only this 1-based record")
    p.add_argument("--scene", help="Scene PGM drawn underneath")
    p.add_argument("--stride", type=int, default=5, help="Key waypoint stride when the record has none")
    p.set_defaults(handler=cmd_render)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return EXIT_OK if ex.code == 0 else EXIT_USAGE
    set_verbosity(args.debug, args.quiet)
    try:
        return args.handler(args)
    except NonFiniteLossError as ex:
        logger.error(str(ex))
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as ex:
        print(f"routebench {args.command}: {ex}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
