"""``aasv`` command line.

Exit codes: 0 ok, 1 pattern/assertion failure, 2 usage or config error, 3 IO error
(including missing or corrupted stage artifacts).
"""

from __future__ import annotations

import argparse
import sys
import time

from . import _kernels
from .config import CONFIG_ENV, ConfigError, dumps_toml, load_config
from .pipeline import ArtifactError, Pipeline, PrerequisiteError, format_checks

EXIT_OK, EXIT_ASSERT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

STAGE_OF = {"gen": "gen", "train": "train", "finetune": "finetune", "train-dc": "train-dc",
            "embed": "embed", "fuse": "fuse", "eval": "eval"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help=f"TOML config file (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. train.epochs=5 (repeatable; wins over the file)")
    common.add_argument("--workdir", help="root directory for stage artifacts")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="worker threads (default 1)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="aasv", description="Age-agnostic speaker verification pipeline on a synthetic corpus.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("gen", parents=[common], help="generate the synthetic corpus and manifest")
    gen.add_argument("--virtual", action="store_true", help="write the manifest only; audio is regenerated from seeds")
    for name, text in (("train", "train the adult encoder"), ("finetune", "fine-tune a child encoder from it"),
                       ("train-dc", "train the domain classifier"), ("embed", "embed the test split"),
                       ("fuse", "write fused embeddings and their provenance sidecar"),
                       ("eval", "score all systems and write the EER report")):
        sub.add_parser(name, parents=[common], help=text)
    rp = sub.add_parser("reproduce-pattern", parents=[common],
                        help="run every stage, then check the expected EER pattern")
    rp.add_argument("--virtual", action="store_true", help="do not materialise WAV files")
    rp.add_argument("--skip-train", action="store_true", help="reuse existing checkpoints; never train")
    sub.add_parser("show-config", parents=[common], help="print the effective config as TOML")
    return parser


def _effective_config(args):
    overrides = list(args.overrides)
    if args.workdir is not None:
        overrides.append(f"workdir={_toml_str(args.workdir)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "virtual", False):
        overrides.append("virtual=true")
    return load_config(args.config, overrides)


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _limit_threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        cfg = _effective_config(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
    except (ConfigError, OSError) as exc:
        print(f"aasv: config error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc, FileNotFoundError) and not isinstance(exc, ConfigError) else EXIT_USAGE
    if args.command == "show-config":
        sys.stdout.write(dumps_toml(cfg))
        return EXIT_OK

    pipe = Pipeline(cfg, threads=args.threads, skip_train=getattr(args, "skip_train", False), log=log)
    t0 = time.perf_counter()
    try:
        with _limit_threads(args.threads):
            if args.command == "reproduce-pattern":
                log(f"kernel backend: {_kernels.backend()}")
                for stage in ("gen", "train", "finetune", "train-dc", "embed", "fuse", "eval", "analysis"):
                    pipe.run(stage, upstream=True)
                checks = pipe.pattern()
                summary = format_checks(checks)
                out = pipe.stage_dir("eval") / "pattern.txt"
                out.write_text(summary, encoding="utf-8")
                sys.stdout.write(summary)
                log(f"elapsed {time.perf_counter() - t0:.1f} s")
                return EXIT_OK if all(c.passed for c in checks) else EXIT_ASSERT
            pipe.run(STAGE_OF[args.command], upstream=False)
    except (PrerequisiteError, ArtifactError, OSError) as exc:
        print(f"aasv {args.command}: stage {pipe.current or '-'}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"aasv {args.command}: stage {pipe.current or '-'}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log(f"elapsed {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
