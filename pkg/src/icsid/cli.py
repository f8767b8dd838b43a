"""Command-line entry point for the whole pipeline.

One binary with five subcommands sharing a single YAML config schema:

  icsid generate CONFIG [--count N] [--seed S] [--out PATH]
  icsid train    CONFIG [--resume]
  icsid finetune CONFIG --from CHECKPOINT [--resume]
  icsid eval     CONFIG --checkpoint CKPT --testset PATH [--traces CSV] [--report PATH]
  icsid inspect  --checkpoint CKPT

Exit codes: 0 success, 2 config error, 3 I/O or file-format error,
4 artifact incompatibility, 130 interrupted (after a final checkpoint
write when training). Relative output directories resolve under the
ICSID_OUT_ROOT environment variable when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import pathlib
import sys

import yaml

from .checkpoint import file_sha256, load_checkpoint
from .config import RunConfig, echo_config, load_run_config, resolve_out_dir
from .datagen import read_testset, write_testset
from .errors import CompatibilityError, ConfigError, FormatError, ValidationError
from .evaluation import evaluate, export_traces
from .model import MetaModel
from .training import fine_tune, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INCOMPAT = 4
EXIT_INTERRUPT = 130


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icsid",
        description="In-context system identification: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample systems and write a test-set file")
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--count", type=int, default=256, help="number of samples")
    p.add_argument(
        "--seed",
        type=int,
        default=None,
        help="override the stream seed (keep test data disjoint from training)",
    )
    p.add_argument("--out", default=None, help="output path (default <out_dir>/testset.icsd)")

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--resume", action="store_true", help="resume from <out_dir>/latest.ckpt")

    p = sub.add_parser("finetune", help="continue training a stored model on a new stream")
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--from", dest="parent", required=True, metavar="CHECKPOINT",
                   help="parent checkpoint to start from")
    p.add_argument("--resume", action="store_true", help="resume from <out_dir>/latest.ckpt")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a stored test set")
    p.add_argument("config", help="YAML run configuration")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--traces", default=None, help="also write per-position trace CSV here")
    p.add_argument("--report", default=None, help="report path (default <out_dir>/eval_report.yaml)")

    p = sub.add_parser("inspect", help="print a checkpoint's config, sizes, and hashes")
    p.add_argument("--checkpoint", required=True)

    return parser


def _load_config(path: str) -> RunConfig:
    try:
        return load_run_config(path)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None


def _val_testset(cfg: RunConfig, out: pathlib.Path):
    """Materialize (once) and load the fixed validation set for a run."""
    if cfg.val_count == 0:
        return None
    path = out / "val.icsd"
    if not path.exists():
        val_cfg = dataclasses.replace(cfg.stream, seed=cfg.val_seed)
        write_testset(path, val_cfg, cfg.val_count)
    return read_testset(path)


def _print_result(result) -> None:
    print(f"finished at iteration {result.final_iteration}")
    if result.best_val_rmse is not None:
        print(f"best val rmse {result.best_val_rmse:.6f}")
    print(f"latest checkpoint: {result.latest_path}")
    if result.best_path is not None:
        print(f"best checkpoint:   {result.best_path}")
    print(f"metrics log:       {result.metrics_path}")


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    stream = cfg.stream
    if args.seed is not None:
        stream = dataclasses.replace(stream, seed=args.seed)
    out_dir = resolve_out_dir(cfg)
    path = pathlib.Path(args.out) if args.out else out_dir / "testset.icsd"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_testset(path, stream, args.count)
    print(
        f"wrote {path}: count={args.count} m={stream.m} N={stream.N} "
        f"n_in={stream.n_in} seed={stream.seed}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    resume_from = None
    if args.resume:
        resume_from = out / "latest.ckpt"
        if not resume_from.exists():
            raise FileNotFoundError(f"--resume given but {resume_from} does not exist")
    val_set = _val_testset(cfg, out)
    model = MetaModel(cfg.model, seed=cfg.model_seed)
    result = train(model, cfg.stream, val_set, cfg.train, out, resume_from=resume_from)
    _print_result(result)
    return EXIT_OK


def _check_finetune_compat(cfg: RunConfig, parent_path: str) -> None:
    """Reject a parent checkpoint whose model cannot consume the new stream."""
    mc = load_checkpoint(parent_path).model_cfg
    problems = []
    if mc.n_in != cfg.stream.n_in:
        problems.append(f"n_in: checkpoint={mc.n_in} stream={cfg.stream.n_in}")
    if cfg.stream.m % mc.patch_len != 0:
        problems.append(f"patch_len: checkpoint={mc.patch_len} does not divide m={cfg.stream.m}")
    if problems:
        raise CompatibilityError(
            "checkpoint is incompatible with the configured stream: " + "; ".join(problems)
        )


def cmd_finetune(args) -> int:
    cfg = _load_config(args.config)
    out = resolve_out_dir(cfg)
    # validate against the parent before touching the output directory
    _check_finetune_compat(cfg, args.parent)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    resume_from = None
    if args.resume:
        resume_from = out / "latest.ckpt"
        if not resume_from.exists():
            raise FileNotFoundError(f"--resume given but {resume_from} does not exist")
    val_set = _val_testset(cfg, out)
    result = fine_tune(args.parent, cfg.stream, val_set, cfg.train, out, resume_from=resume_from)
    _print_result(result)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    out = resolve_out_dir(cfg)
    report = evaluate(args.checkpoint, args.testset, chunk=cfg.eval_chunk)
    text = report.to_text()
    print(text, end="" if text.endswith("\n") else "\n")
    report_path = pathlib.Path(args.report) if args.report else out / "eval_report.yaml"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.save(report_path)
    print(f"report written to {report_path}")
    if args.traces:
        traces_path = pathlib.Path(args.traces)
        traces_path.parent.mkdir(parents=True, exist_ok=True)
        export_traces(args.checkpoint, args.testset, traces_path, chunk=cfg.eval_chunk)
        print(f"traces written to {traces_path}")
    return EXIT_OK


def _module_of(name: str) -> str:
    head = name.split(".", 1)[0]
    return head


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_cfg
    print(f"checkpoint: {args.checkpoint}")
    print(f"file sha256: {file_sha256(args.checkpoint)}")
    cfg_hash = hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()
    ).hexdigest()
    print(f"model config sha256: {cfg_hash}")
    print(f"iteration: {ckpt.iteration}")
    print(f"parent: {ckpt.parent if ckpt.parent else '(none)'}")
    if ckpt.meta:
        print(f"meta: {json.dumps(ckpt.meta, sort_keys=True)}")
    print("model config:")
    for key, value in cfg.to_dict().items():
        print(f"  {key}: {value}")
    sizes: dict[str, int] = {}
    total = 0
    for name, arr in ckpt.params.items():
        total += arr.size
        sizes[_module_of(name)] = sizes.get(_module_of(name), 0) + arr.size
    print(f"total parameters: {total}")
    print("parameters by module:")
    for mod in sorted(sizes):
        print(f"  {mod}: {sizes[mod]}")
    print(f"optimizer state: {'present' if ckpt.opt is not None else 'absent'}")
    return EXIT_OK


_DISPATCH = {
    "generate": cmd_generate,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompatibilityError as exc:
        print(f"incompatible artifacts: {exc}", file=sys.stderr)
        return EXIT_INCOMPAT
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        # training already wrote its final checkpoint before re-raising
        print("interrupted", file=sys.stderr)
        return EXIT_INTERRUPT


if __name__ == "__main__":
    sys.exit(main())
