"""Command line driver.

Verbs: ``calibrate``, ``pretrain``, ``run``, ``ablate``, ``eval``, ``replay``.
Every config key is also a flag (``--hamt.beta 1.0``); flags override the
config file, which overrides the built-in defaults.

Exit codes: 0 success, 2 configuration error, 3 runtime or training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from ..errors import CalibrationError, ConfigError, ContractViolation, TrainingError
from ..stream import DomainProfile, Stream, export_stream, import_stream
from ..trainer import accuracy, load_checkpoint, save_checkpoint
from .ablation import STANDARD_ROWS, ablation_grid
from .config import apply_overrides, dump_config, flag_keys, load_config
from .episode import Pretrained, _Evaluator, build_profile, calibrate, corruption_params, pretrain, run_episode

log = logging.getLogger("hamlet")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    g = p.add_argument_group("config overrides")
    for key, default in flag_keys():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", default=None, help=f"default: {default!r}")


def _config(args: argparse.Namespace):
    cfg = load_config(args.config)
    over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    return apply_overrides(cfg, over) if over else cfg


def _pretrained(cfg, checkpoint: Path | None) -> Pretrained:
    pre = pretrain(cfg)
    if checkpoint is None:
        return pre
    triplet, head, _, _ = load_checkpoint(checkpoint)
    triplet.momentum = cfg.trainer.momentum
    if triplet.student.dims != pre.triplet.student.dims:
        raise ConfigError(f"checkpoint dims {triplet.student.dims} do not match model.dims {pre.triplet.student.dims}")
    return Pretrained(pre.source, triplet, head)


def _emit(obj: dict, out: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)


def cmd_calibrate(args, cfg) -> int:
    pre = _pretrained(cfg, args.checkpoint)
    cal = calibrate(cfg, pre, build_profile(cfg))
    _emit(
        {"omega": cal.omega.tolist(), "cost_mode": cfg.hamt.cost_mode, "B_source": cal.b_source, "B_hard": cal.b_hard, "z": cal.z},
        args.out,
    )
    return EXIT_OK


def cmd_pretrain(args, cfg) -> int:
    pre = pretrain(cfg)
    src_acc = 100.0 * accuracy(pre.triplet.student, pre.source.x, pre.source.y)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, pre.triplet, pre.head, extra={"seed": cfg.seed, "source_accuracy": src_acc})
    print(f"saved {args.out} (source accuracy {src_acc:.2f}%)")
    return EXIT_OK


def _report(result) -> None:
    s = result.metrics.summary()
    print(
        f"h-mean {s['hmean']['total']:.2f} (source {s['hmean']['source']:.2f}, target {s['hmean']['target']:.2f}), "
        f"hardest {s['hardest_domain']['domain_id']} {s['hardest_domain']['accuracy']:.2f}, "
        f"total {s['flops']['total'] / 1e6:.1f} MFLOPs, adapt bwd {s['flops']['adapt_bwd'] / 1e6:.1f} MFLOPs, "
        f"events {s['events']}, steps {s['steps_executed']}"
    )


def cmd_run(args, cfg) -> int:
    pre = _pretrained(cfg, args.checkpoint)
    profile = build_profile(cfg)
    if args.export_stream:
        n = export_stream(Stream(profile, pre.source, corruption_params(cfg), cfg.stream.skew), args.export_stream)
        log.info("exported %d frames to %s", n, args.export_stream)
    out = args.out / cfg.run_id
    result = run_episode(cfg, pre=pre, profile=profile, partial_dir=out)
    result.write(out)
    dump_config(cfg, out / "config.yaml")
    _report(result)
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_replay(args, cfg) -> int:
    frames = list(import_stream(args.stream))
    if not frames:
        raise ConfigError(f"{args.stream}: no frames")
    schedule: list[list] = []
    for f in frames:
        if schedule and schedule[-1][0] == f.domain_id:
            schedule[-1][2] += 1
        else:
            schedule.append([f.domain_id, f.intensity, 1])
    profile = DomainProfile([tuple(p) for p in schedule], cfg.seed)
    pre = _pretrained(cfg, args.checkpoint)
    out = args.out / cfg.run_id
    result = run_episode(cfg, pre=pre, profile=profile, frames=frames, partial_dir=out)
    result.write(out)
    dump_config(cfg, out / "config.yaml")
    _report(result)
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    labels = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in labels if r not in STANDARD_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {sorted(STANDARD_ROWS)}")
    seeds = [int(s) for s in args.seeds.split(",")]
    table = ablation_grid(cfg, {r: STANDARD_ROWS[r] for r in labels}, seeds)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(table.to_csv())
    (args.out / "ablation.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    pre = _pretrained(cfg, args.checkpoint)
    evaluator = _Evaluator(cfg, build_profile(cfg), pre.source)
    _emit({"run_id": cfg.run_id, "seed": cfg.seed, "accuracy": evaluator(pre.triplet.student)}, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamlet-bench", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("calibrate", help="measure action costs and detector levels")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="write the calibration JSON here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("pretrain", help="train the source triplet and save a checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="deploy on the configured stream and write artifacts")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--export-stream", type=Path, help="also write the stream frames as JSONL")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="deploy on a recorded JSONL stream")
    p.add_argument("stream", type=Path)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("ablate", help="component ablation grid over several seeds")
    p.add_argument("--rows", default="A,B,C,D,E,F,G")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="holdout accuracy of a checkpoint on every domain")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    for name in ("calibrate", "pretrain", "run", "replay", "ablate", "eval"):
        _add_config_flags(sub.choices[name])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CalibrationError, ContractViolation, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
