"""Command-line entry point: ``volvlm <command> [flags]``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 checkpoint error. Logs go to stderr and to ``<out>/<command>.log.jsonl``
as one JSON object per line, stamped with the config hash and seed.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as P
from .checkpoint import CheckpointError
from .config import PRESETS, RunConfig, load_config
from .lm import SampleError, SequenceTooLong, build_vocab
from .mae import ConfigError
from .perceiver import KINDS, check_grid
from .phantom import SchemaError, TASKS, generate_dataset, spacing_for
from .volume import VolumeFormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("volvlm")


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def __init__(self, command, config_hash, seed):
        super().__init__()
        self.stamp = {"cmd": command, "config_hash": config_hash, "seed": seed}

    def format(self, record):
        rec = {"ts": round(record.created, 3), "level": record.levelname.lower(), **self.stamp,
               "logger": record.name, "msg": record.getMessage()}
        extra = getattr(record, "data", None)
        if extra:
            rec.update(extra)
        return json.dumps(rec, sort_keys=False)


def _setup_logging(command, cfg: RunConfig | None, out_dir: Path | None, quiet=False):
    root = logging.getLogger("volvlm")
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    root.setLevel(logging.INFO)
    root.propagate = False
    fmt = _JsonLines(command, cfg.hash if cfg else None, cfg.train.seed if cfg else None)
    handlers = []
    if not quiet:
        handlers.append(logging.StreamHandler(sys.stderr))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out_dir / f"{command}.log.jsonl", mode="w", encoding="utf-8"))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)


def _event(msg, **data):
    log.info(msg, extra={"data": data})


def _step_logger(every=50):
    def on_step(rec):
        if rec["step"] % every == 0:
            _event("step", **rec)
    return on_step


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _dims(text):
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected XxYxZ, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive sizes XxYxZ, got {text!r}")
    return dims


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _data_dir(args, cfg: RunConfig) -> Path:
    return Path(args.data if args.data is not None else cfg.paths.data)


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out if args.out is not None else cfg.paths.out)


def _claim(path: Path, force: bool):
    """Refuse to overwrite an existing artifact unless ``--force``."""
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _require(path: Path, what):
    if not path.is_file():
        raise CheckpointError(f"missing {what}: {path}")
    return path


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args):
    out = Path(args.out)
    if args.n < 1:
        raise UsageError(f"--n must be >= 1, got {args.n}")
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty; pass --force to regenerate")
        for name in ("volumes",):
            shutil.rmtree(out / name, ignore_errors=True)
        for name in ("train.jsonl", "test.jsonl", "manifest.json"):
            (out / name).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    _setup_logging("gen-data", None, out, args.quiet)
    t0 = time.perf_counter()
    manifest = generate_dataset(out, args.n, args.seed, dims=args.dims, spacing=spacing_for(args.dims))
    _event("dataset written", out=str(out), seconds=round(time.perf_counter() - t0, 3))
    c = manifest["counts"]
    print(f"{out}: {c['volumes']} volumes, {c['train_patients']} train / {c['test_patients']} test patients, "
          f"{c['train_samples']} / {c['test_samples']} samples, seed {manifest['seed']}")
    return EXIT_OK


def shapes_ledger(cfg: RunConfig):
    vit, pc = cfg.vit, cfg.perceiver
    grid = vit.grid
    out_grid = check_grid(grid, pc.k)
    x = lambda t: "x".join(str(v) for v in t)  # noqa: E731
    return [
        f"config hash: {cfg.hash}",
        f"input dims: {x(vit.input_dims)} at {x(cfg.preprocess.target_spacing_mm)} mm",
        f"patch size: {x(vit.patch_size)}",
        f"patch grid: {x(grid.dims)}",
        f"perceiver: {pc.kind}, k={pc.k}, out_channels={pc.out_channels}",
        f"output grid: {x(out_grid.dims)}",
        f"tokens: {grid.n_tokens} -> {out_grid.n_tokens}",
        f"lm prefix length: {cfg.prefix_len} (d_model {cfg.lm.d_model}, max_seq_len {cfg.lm.max_seq_len})",
    ]


def cmd_shapes(args):
    cfg = _config(args)
    _setup_logging("shapes", cfg, None, quiet=True)
    print("\n".join(shapes_ledger(cfg)))
    return EXIT_OK


def cmd_pretrain_mae(args):
    cfg = _config(args)
    data, out = _data_dir(args, cfg), _out_dir(args, cfg)
    ckpt = out / "mae.vckp"
    _claim(ckpt, args.force)
    _setup_logging("pretrain-mae", cfg, out, args.quiet)
    t0 = time.perf_counter()
    model, hist = P.run_pretrain_mae(cfg, data, on_step=_step_logger())
    P.save_mae(ckpt, model, cfg, hist)
    _event("saved", path=str(ckpt), first_loss=hist[0]["loss"], final_loss=hist[-1]["loss"],
           seconds=round(time.perf_counter() - t0, 3))
    return EXIT_OK


def _pretrain_lm(cfg, data, out, force):
    ckpt = out / "lm.vckp"
    _claim(ckpt, force)
    t0 = time.perf_counter()
    lm, vocab, hist = P.run_pretrain_lm(cfg, data, on_step=_step_logger())
    P.save_lm(ckpt, lm, vocab, cfg, hist)
    _event("saved", path=str(ckpt), final_loss=hist[-1]["loss"], vocab_hash=vocab.hash,
           seconds=round(time.perf_counter() - t0, 3))
    return lm, vocab


def cmd_pretrain_lm(args):
    cfg = _config(args)
    data, out = _data_dir(args, cfg), _out_dir(args, cfg)
    _setup_logging("pretrain-lm", cfg, out, args.quiet)
    _pretrain_lm(cfg, data, out, args.force)
    return EXIT_OK


def _data_vocab_hash(data):
    return build_vocab(t for s in P.load_split(data, "train") for t in (s.question, s.answer)).hash


def cmd_sft(args):
    cfg = _config(args)
    data, out = _data_dir(args, cfg), _out_dir(args, cfg)
    ckpt = out / f"stage{args.stage}.vckp"
    _claim(ckpt, args.force)
    _setup_logging("sft", cfg, out, args.quiet)
    t0 = time.perf_counter()
    if args.stage == 1:
        encoder = P.load_encoder(_require(Path(args.ckpt) if args.ckpt else out / "mae.vckp", "MAE checkpoint"), cfg)
        if args.lm:
            lm, vocab = P.load_lm(_require(Path(args.lm), "base LM checkpoint"), cfg)
            if vocab.hash != _data_vocab_hash(data):
                raise CheckpointError(f"{args.lm}: vocab hash {vocab.hash} does not match the training data")
        else:
            _event("no --lm given; warm-starting a base LM")
            lm, vocab = _pretrain_lm(cfg, data, out, args.force)
        vlm, summary, cache = P.run_sft_stage1(cfg, data, encoder, lm, vocab, on_step=_step_logger())
    else:
        src = _require(Path(args.ckpt) if args.ckpt else out / "stage1.vckp", "stage-1 checkpoint")
        encoder, vlm, vocab, norm, meta = P.load_vlm(src, cfg)
        if meta.get("stage") != 1:
            raise CheckpointError(f"{src}: stage 2 needs a stage-1 checkpoint, got stage {meta.get('stage')}")
        if vocab.hash != _data_vocab_hash(data):
            raise CheckpointError(f"{src}: vocab hash {vocab.hash} does not match the training data")
        vlm, summary, cache = P.run_sft_stage2(cfg, data, encoder, vlm, vocab, on_step=_step_logger(), norm=norm)
    P.save_vlm(ckpt, encoder, vlm, vocab, cfg, args.stage, cache.norm, summary)
    hist = summary["history"]
    _event("saved", path=str(ckpt), stage=args.stage, steps=len(hist),
           first_loss=hist[0]["loss"] if hist else None, final_loss=hist[-1]["loss"] if hist else None,
           skipped=len(summary["errors"]), frozen_unchanged=summary["frozen_before"] == summary["frozen_after"],
           seconds=round(time.perf_counter() - t0, 3))
    return EXIT_OK


def _load_for_inference(args, cfg):
    out = _out_dir(args, cfg)
    src = _require(Path(args.ckpt) if args.ckpt else out / "stage2.vckp", "fine-tuned checkpoint")
    encoder, vlm, vocab, norm, meta = P.load_vlm(src, cfg)
    cache = P.FeatureCache(encoder, _data_dir(args, cfg), cfg, norm)
    return vlm, vocab, cache


def _split_samples(data, split, task):
    samples = [s for s in P.load_split(data, split) if s.task == task]
    if not samples:
        raise P.DataError(f"no {task!r} samples in the {split} split of {data}")
    return samples


def cmd_generate(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    target = out / f"generations_{args.task}.jsonl"
    _claim(target, args.force)
    _setup_logging("generate", cfg, out, args.quiet)
    vlm, vocab, cache = _load_for_inference(args, cfg)
    samples = _split_samples(_data_dir(args, cfg), args.split, args.task)
    if args.limit:
        samples = samples[:args.limit]
    cache.warm(P.volume_paths(samples))
    texts = P.predict(vlm, cache, samples, vocab, cfg.train.max_new_tokens)
    with open(target, "w", encoding="utf-8") as fh:
        for s, t in zip(samples, texts):
            fh.write(json.dumps({"id": s.id, "question": s.question, "text": t}) + "\n")
    _event("generated", path=str(target), n=len(samples))
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    out = _out_dir(args, cfg)
    target = out / "report.json"
    _claim(target, args.force)
    _setup_logging("eval", cfg, out, args.quiet)
    vlm, vocab, cache = _load_for_inference(args, cfg)
    samples = _split_samples(_data_dir(args, cfg), args.split, args.task)
    cache.warm(P.volume_paths(samples))
    report = P.evaluate(vlm, cache, samples, vocab, args.task, cfg.train.max_new_tokens)
    P.write_report(report, target)
    _event("report written", path=str(target), task=args.task, n=report["n"], **report["metrics"])
    print(json.dumps({"task": report["task"], "n": report["n"], "metrics": report["metrics"]}))
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args)
    data, out = _data_dir(args, cfg), _out_dir(args, cfg)
    target = out / "ablation.json"
    _claim(target, args.force)
    _setup_logging("ablate", cfg, out, args.quiet)
    encoder = P.load_encoder(_require(Path(args.ckpt) if args.ckpt else out / "mae.vckp", "MAE checkpoint"), cfg)
    if args.lm:
        lm, vocab = P.load_lm(_require(Path(args.lm), "base LM checkpoint"), cfg)
    else:
        lm, vocab = _pretrain_lm(cfg, data, out, args.force)
    kinds = tuple(args.kinds.split(",")) if args.kinds else KINDS
    table = P.run_ablation(cfg, data, encoder, lm.state_dict(), vocab, kinds=kinds, on_step=_step_logger())
    target.write_text(json.dumps(table, indent=2) + "\n", encoding="utf-8")
    md = P.ablation_markdown(table)
    (out / "ablation.md").write_text(md, encoding="utf-8")
    print(md, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="volvlm", description="3D volume-language model toolkit")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP threads; 1 gives bit-reproducible runs")
    ap.add_argument("--quiet", action="store_true", help="no log lines on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, data=True, ckpt=False):
        p.add_argument("--config", default=None, help=f"preset ({', '.join(PRESETS)}) or JSON file; default toy")
        p.add_argument("--out", default=None, help="output directory (default: paths.out)")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if data:
            p.add_argument("--data", default=None, help="dataset directory (default: paths.data)")
        if ckpt:
            p.add_argument("--ckpt", default=None, help="input checkpoint")

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=(48, 48, 24), help="voxel grid XxYxZ over a 96 mm field of view")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("shapes", help="print the token ledger for a config (no weights)")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("pretrain-mae", help="masked-autoencoder pretraining of the 3D ViT")
    common(p)
    p.set_defaults(func=cmd_pretrain_mae)

    p = sub.add_parser("pretrain-lm", help="text-only warm start of the base LM")
    common(p)
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("sft", help="supervised fine-tuning, stage 1 (perceiver) or 2 (perceiver + LoRA)")
    common(p, ckpt=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--lm", default=None, help="base LM checkpoint for stage 1 (default: warm-start one)")
    p.set_defaults(func=cmd_sft)

    for name, func, helptext in (("generate", cmd_generate, "generate answers for one task"),
                                 ("eval", cmd_eval, "evaluate one task and write report.json")):
        p = sub.add_parser(name, help=helptext)
        common(p, ckpt=True)
        p.add_argument("--task", choices=TASKS, default="diagnosis" if name == "eval" else "report")
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "generate":
            p.add_argument("--limit", type=int, default=0, help="first N samples only")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="both SFT stages and text metrics for each perceiver kind")
    common(p, ckpt=True)
    p.add_argument("--lm", default=None)
    p.add_argument("--kinds", default=None, help=f"comma-separated subset of {','.join(KINDS)}")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return args.func(args)
    except (ConfigError, UsageError, SequenceTooLong) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (P.DataError, SchemaError, VolumeFormatError, SampleError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "checkpoint", exc)


def _fail(code, kind, exc):
    print(f"volvlm: {kind} error: {exc}", file=sys.stderr)
    if log.handlers:
        log.error(str(exc), extra={"data": {"error": kind, "exit_code": code}})
    return code


if __name__ == "__main__":
    sys.exit(main())
