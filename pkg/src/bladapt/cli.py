"""
``bladapt`` command-line entry point.

    bladapt gen|learn|adapt|test|gradcheck|oracle [--config PATH] [--seed N]
            [--mode BL|RBL|naive] [--scale tiny|small] [--workdir PATH]
            [--set KEY=VALUE ...]

Exit codes: 0 success, 1 validation failure, 2 I/O problem (including a
missing prerequisite artifact), 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint
from . import config as C
from . import network as N
from .bilevel import DivergedStepError
from .data import ImageFormatError, build_benchmark, load_benchmark, write_benchmark
from .gradcheck import format_report, run_gradcheck
from .oracle import format_table, oracle_grid
from .phases import adapt_phase, learn_phase, test_phase, write_log

log = logging.getLogger("bladapt")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3


class MissingArtifactError(FileNotFoundError):
    """A prerequisite command has not been run."""


def learned_path(cfg: C.RunConfig) -> Path:
    return cfg.checkpoint_dir / f"learned_{cfg.mode}.blad"


def adapted_path(cfg: C.RunConfig, scene: str) -> Path:
    return cfg.checkpoint_dir / f"adapted_{cfg.mode}_{scene}.blad"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `bladapt {producer}` with the same workdir and mode first")
    return path


def _datasets(cfg: C.RunConfig) -> dict:
    if not (cfg.data_dir / "manifest.csv").exists():
        raise MissingArtifactError(f"missing benchmark manifest {cfg.data_dir / 'manifest.csv'}; run `bladapt gen` first")
    return {d.scene_id: d for d in load_benchmark(cfg.data_dir)}


def _scenes(cfg: C.RunConfig, datasets: dict) -> list:
    unknown = [s for s in cfg.scene_list if s not in datasets]
    if unknown:
        raise C.ConfigError(f"unknown scenes {unknown}; benchmark has {sorted(datasets)}")
    return cfg.scene_list


def cmd_gen(cfg: C.RunConfig) -> int:
    datasets = build_benchmark(cfg.seed, cfg.scale)
    manifest = write_benchmark(datasets, cfg.data_dir)
    for d in datasets:
        log.info("scene %s: %s noise=%s learnable=%s", d.scene_id, d.spec.degradation_text(), d.spec.noise, d.spec.learnable)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_learn(cfg: C.RunConfig) -> int:
    if cfg.mode == "naive":
        raise C.ConfigError("naive mode has no learning phase; run `bladapt adapt --mode naive` instead")
    datasets = _datasets(cfg)
    result = learn_phase(list(datasets.values()), cfg.mode, cfg.bilevel())
    checkpoint.save(result.partition.flat(), learned_path(cfg))
    write_log(result.records, cfg.report_dir / f"learn_{cfg.mode}_log.csv")
    print(f"wrote {learned_path(cfg)}")
    return EXIT_OK


def cmd_adapt(cfg: C.RunConfig) -> int:
    datasets = _datasets(cfg)
    scenes = _scenes(cfg, datasets)
    learned = None
    if cfg.mode != "naive":
        learned = N.ParameterPartition.from_flat(checkpoint.load(_require(learned_path(cfg), f"learn --mode {cfg.mode}")))
    init = cfg.decoder_init
    if init == "auto":
        init = "meta" if learned is not None and learned.meta_init is not None else "random"
    lines = []
    for scene in scenes:
        res = adapt_phase(learned, datasets[scene], cfg.bilevel(), decoder_init=init, mode=cfg.mode)
        checkpoint.save(res.partition.flat(), adapted_path(cfg, scene))
        write_log(res.records, cfg.report_dir / f"adapt_{cfg.mode}_{scene}_log.csv")
        if res.encoder_frozen is None:
            line = f"scene {scene}: encoder frozen check: n/a (mode naive trains the encoder)"
        else:
            digest = N.checksum({k: res.partition.encoder[k] for k in N.trainable_names(res.partition.encoder)})
            line = f"scene {scene}: encoder frozen check: {'PASS' if res.encoder_frozen else 'FAIL'} sha256={digest}"
        log.info(line)
        lines.append(line)
        if res.encoder_frozen is False:
            raise RuntimeError(f"encoder parameters changed during adaptation of scene {scene}")
    path = cfg.report_dir / f"adapt_{cfg.mode}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_test(cfg: C.RunConfig) -> int:
    datasets = _datasets(cfg)
    scenes = _scenes(cfg, datasets)
    for scene in scenes:
        part = N.ParameterPartition.from_flat(checkpoint.load(_require(adapted_path(cfg, scene), f"adapt --mode {cfg.mode}")))
        dump = cfg.report_dir / "images" / f"{cfg.mode}_{scene}" if cfg.dump_images else None
        report = test_phase(part, datasets[scene], dump_dir=dump)
        out = cfg.report_dir / f"report_{cfg.mode}_{scene}.csv"
        out.parent.mkdir(parents=True, exist_ok=True)
        report.write(out)
        m = report.means()
        print(f"scene {scene}: psnr={m['psnr']:.3f} ssim={m['ssim']:.4f} de={m['de']:.3f} loe={m['loe']:.1f} -> {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: C.RunConfig) -> int:
    results = run_gradcheck(cfg.seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_oracle(cfg: C.RunConfig) -> int:
    print(format_table(oracle_grid()))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "learn": cmd_learn,
    "adapt": cmd_adapt,
    "test": cmd_test,
    "gradcheck": cmd_gradcheck,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bladapt", description="Bilevel fast scene adaptation for low-light enhancement.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["BL", "RBL", "naive"])
    p.add_argument("--scale", choices=["tiny", "small"])
    p.add_argument("--workdir")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> C.RunConfig:
    pairs = []
    for i, item in enumerate(args.set, 1):
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((i, k.strip(), v.strip()))
    overrides = C.parse_pairs(pairs, "--set")
    overrides.update(command=args.command, seed=args.seed, mode=args.mode, scale=args.scale, workdir=args.workdir)
    if args.config is not None:
        return C.load(args.config, **overrides)
    return C.parse("", **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except (DivergedStepError, ArithmeticError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, checkpoint.CheckpointError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
