"""Command-line entry point: ``physcene <command> [options]``.

Every failure exits with status 2 and prints one JSON object to stderr,
e.g. ``{"error": "schema", "field": "objects[0].size", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from physcene.denoiser import load_checkpoint
from physcene.experiment import (
    ExperimentConfig,
    ablation_json,
    ablation_table,
    evaluate_dir,
    load_documents,
    pick_floors,
    run_ablation,
    sample_to_dir,
    scene_files,
    train_model,
    write_dataset,
)
from physcene.reachability import AgentSpec, walkable_map
from physcene.render import write_svg
from physcene.sampling import guidance_config
from physcene.scene import Taxonomy, scene_boxes
from physcene.scene_io import SchemaError, load_scene

logger = logging.getLogger("physcene")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(path: Optional[str]) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_generate_dataset(args) -> int:
    cfg = _config(args.config)
    out = write_dataset(cfg, Path(args.out) if args.out else None)
    print(json.dumps({"dataset": str(out), "count": cfg.n_scenes}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.steps is not None:
        cfg.training = replace(cfg.training, steps=args.steps)
    out_dir = cfg.path(cfg.output_dir)
    ckpt, losses = train_model(cfg, out_dir / "loss.csv")
    print(
        json.dumps(
            {
                "checkpoint": str(cfg.path(cfg.checkpoint)),
                "loss_csv": str(out_dir / "loss.csv"),
                "initial_loss": losses[0] if losses else None,
                "final_loss": losses[-1] if losses else None,
            }
        )
    )
    return 0


def _floors(directory: str, taxonomy: Taxonomy, n: int, part: str = "test"):
    d = Path(directory)
    files = scene_files(d, part if (d / "manifest.json").exists() else None)
    return pick_floors([doc.floor for doc in load_documents(files, taxonomy)], n)


def _guidance(cfg: ExperimentConfig, args):
    base = cfg.guidance
    if args.lam is not None:
        base = replace(base, lam=args.lam)
    return base


def cmd_sample(args) -> int:
    cfg = _config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    floors = _floors(args.floors, ckpt.taxonomy, args.n)
    guidance = guidance_config(args.guidance or "", _guidance(cfg, args))
    agent = AgentSpec(width=args.agent_width) if args.agent_width else cfg.agent
    sample_to_dir(ckpt, floors, Path(args.out), guidance, agent, args.seed, cfg.resolution, svg=not args.no_svg)
    print(json.dumps({"scenes": str(args.out), "count": len(floors)}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args.config)
    agent = replace(cfg.agent, width=args.agent_width) if args.agent_width else cfg.agent
    report = evaluate_dir(
        Path(args.scenes),
        agent,
        cfg.generator.taxonomy,
        Path(args.reference) if args.reference else None,
        Path(args.floors) if args.floors else None,
        cfg.resolution,
        args.seed,
    )
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.table())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    floors_dir = args.floors or str(cfg.path(cfg.dataset))
    floors = _floors(floors_dir, ckpt.taxonomy, args.n)
    reference = None
    if args.reference:
        reference = [d.scene for d in load_documents(scene_files(Path(args.reference), "train"), ckpt.taxonomy)]
    base = _guidance(cfg, args)
    out = Path(args.out)
    rows = run_ablation(ckpt, floors, base, cfg.agent, args.seed, cfg.resolution, reference, out=out / "svg")
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(ablation_json(rows, base, args.seed))
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_render(args) -> int:
    cfg = _config(args.config)
    doc = load_scene(args.scene, cfg.generator.taxonomy)
    walk = None
    if args.walkable:
        walk = walkable_map(doc.floor, scene_boxes(doc.scene), cfg.agent, cfg.resolution)
    write_svg(args.out, doc.scene, doc.floor, cfg.generator.taxonomy, walkable=walk, title=Path(args.scene).stem)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="physcene", description="Physics-guided indoor layout diffusion at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-dataset", help="write synthetic training scenes and a manifest")
    g.add_argument("--config", help="experiment config JSON")
    g.add_argument("--out", help="dataset directory (defaults to the config's dataset path)")
    g.set_defaults(fn=cmd_generate_dataset)

    t = sub.add_parser("train", help="train the denoiser; writes a checkpoint and loss.csv")
    t.add_argument("--config", help="experiment config JSON")
    t.add_argument("--steps", type=int, help="override training steps")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="sample scenes on given floors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--floors", required=True, help="dataset or directory of scene/floor JSONs")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--guidance", default="", help="comma list of coll,layout,reach (empty: unguided)")
    s.add_argument("--lam", type=float, help="guidance scale")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--agent-width", type=float)
    s.add_argument("--config", help="experiment config JSON for guidance defaults")
    s.add_argument("--no-svg", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("evaluate", help="metrics over a directory of scenes")
    e.add_argument("--scenes", required=True)
    e.add_argument("--floors", help="directory of floors matched by source_floor")
    e.add_argument("--reference", help="dataset directory for CKL")
    e.add_argument("--agent-width", type=float)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config", help="experiment config JSON")
    e.add_argument("--out", help="report JSON path")
    e.set_defaults(fn=cmd_evaluate)

    a = sub.add_parser("ablate", help="5-row guidance on/off grid")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--config", help="experiment config JSON")
    a.add_argument("--floors", help="floors source (defaults to the config's dataset, test split)")
    a.add_argument("--reference", help="dataset directory for CKL")
    a.add_argument("--n", type=int, default=512)
    a.add_argument("--lam", type=float)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("render", help="top-down SVG of one scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--walkable", action="store_true", help="underlay the walkable map")
    r.add_argument("--config", help="experiment config JSON")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def _fail(kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        for name in ("n", "steps"):
            v = getattr(args, name, None)
            if v is not None and v < 1:
                raise ValueError(f"--{name} must be positive")
        return args.fn(args)
    except SchemaError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 2
    except FileNotFoundError as exc:
        return _fail("not_found", str(exc))
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        return _fail("invalid_input", str(exc))


if __name__ == "__main__":
    sys.exit(main())
