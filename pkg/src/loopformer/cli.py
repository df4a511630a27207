"""Command-line surface: train | eval | sweep | diagnose | generate | flops.

Every command resolves its configuration the same way — preset, then an
optional config file, then repeated `--set section.key=value` overrides —
and echoes the effective config into its output directory so any run can
be reproduced from what it left on disk. Output directories default to
$LOOPFORMER_RUN_DIR (or ./runs) with one subdirectory per command.

Failures print a single `error: ...` line to stderr, remove any partial
output files the command had started writing, and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint
from .data import ByteTokenizer, load_corpus, load_text, make_corpus
from .diagnostics import (
    collect_snapshots,
    mean_offdiag,
    report,
    write_cka_csv,
    write_metrics_csv,
)
from .inference import (
    flops_model,
    generate,
    perplexity,
    trajectory_sweep,
    training_overhead,
)
from .model import init_model
from .runconfig import RunConfig, apply_overrides, dump_config, load_config, preset
from .trajectory import (
    ScheduleError,
    max_trajectory,
    parse_schedule,
    uniform_trajectory,
)
from .training import train

RUN_DIR_ENV = "LOOPFORMER_RUN_DIR"

_partial_outputs: list = []


def _note_output(path) -> str:
    _partial_outputs.append(str(path))
    return str(path)


def _remove_partial_outputs() -> None:
    while _partial_outputs:
        path = _partial_outputs.pop()
        try:
            os.remove(path)
        except OSError:
            pass


def _out_dir(args, command: str) -> str:
    base = args.out or os.path.join(os.environ.get(RUN_DIR_ENV, "runs"), command)
    os.makedirs(base, exist_ok=True)
    return base


def _resolve_config(args) -> RunConfig:
    rc = preset(args.preset)
    if args.config:
        rc = load_config(args.config, base=rc)
    apply_overrides(rc, args.set or [])
    return rc


def _echo_config(rc: RunConfig, out: str) -> None:
    path = _note_output(os.path.join(out, "config.cfg"))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(rc))


def _load_model(args):
    model, extras = load_checkpoint(args.ckpt)
    rc = extras["config"]
    apply_overrides(rc, args.set or [])
    return model, rc, extras


def _resolve_trajectory(args, model, rc: RunConfig):
    budget = args.budget if args.budget else (rc.eval.budget or model.config.max_loops)
    if budget > model.config.max_loops:
        raise ValueError(f"budget {budget} exceeds the model's max_loops {model.config.max_loops}")
    if model.config.variant == "base" and budget != 1:
        raise ValueError(f"base variant serves only budget 1, got {budget}")
    schedule = args.schedule or rc.eval.schedule
    if schedule == "uniform":
        return uniform_trajectory(budget)
    if schedule == "max":
        return max_trajectory(model.config.max_loops)
    traj = parse_schedule(schedule, model.config.max_loops)
    if args.budget and traj.budget != args.budget:
        raise ValueError(
            f"--schedule has {traj.budget} steps but --budget asks for {args.budget}"
        )
    return traj


def _eval_ids(args, model) -> np.ndarray:
    raw = load_text(args.data)
    if args.tokenizer == "byte":
        ids = ByteTokenizer().encode(raw)
        if model.config.vocab_size < 256:
            raise ValueError(
                f"model vocab_size {model.config.vocab_size} cannot score byte tokens"
            )
    else:
        corpus = make_corpus(raw, mode="char", val_fraction=args.val_fraction)
        ids = np.concatenate([corpus.train, corpus.val])
        if corpus.tokenizer.vocab_size != model.config.vocab_size:
            raise ValueError(
                f"char vocabulary size {corpus.tokenizer.vocab_size} does not match "
                f"model vocab_size {model.config.vocab_size}"
            )
    return ids


def _diag_prompts(ids: np.ndarray, t_max: int, count: int):
    count = min(count, max(1, ids.size // t_max))
    starts = np.linspace(0, max(0, ids.size - t_max), count).astype(int)
    return [ids[s : s + t_max] for s in starts]


# -------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    rc = _resolve_config(args)
    corpus = load_corpus(args.data, mode=args.tokenizer, val_fraction=args.val_fraction)
    if corpus.tokenizer.vocab_size != rc.model.vocab_size:
        if args.tokenizer == "char":
            # the char vocabulary only exists once the data is read
            rc.model = dataclasses.replace(rc.model, vocab_size=corpus.tokenizer.vocab_size)
        else:
            raise ValueError(
                f"model vocab_size {rc.model.vocab_size} does not match "
                f"byte tokenizer size {corpus.tokenizer.vocab_size}"
            )
    out = _out_dir(args, "train")
    _echo_config(rc, out)
    model = init_model(rc.model, seed=rc.train.seed)
    _partial_outputs.clear()  # from here on, outputs are real run artifacts
    log = train(model, corpus, rc.train, run_dir=out)
    final = log.steps[-1]
    print(
        f"trained {rc.train.total_steps} steps: total={final.total:.4f} "
        f"loss_L={final.loss_L:.4f} run_dir={out}"
    )
    return 0


def cmd_eval(args) -> int:
    model, rc, _ = _load_model(args)
    traj = _resolve_trajectory(args, model, rc)
    ids = _eval_ids(args, model)
    eval_tokens = args.eval_tokens or rc.eval.eval_tokens
    if eval_tokens > 0:
        ids = ids[:eval_tokens]
    stride = args.stride or rc.eval.stride or None
    out = _out_dir(args, "eval")
    _echo_config(rc, out)
    ppl = perplexity(model, ids, traj, stride=stride)
    print(f"ppl={ppl:.6f} budget={traj.budget} schedule={traj} tokens={ids.size}")
    return 0


def cmd_sweep(args) -> int:
    model, rc, _ = _load_model(args)
    if not args.budget:
        raise ValueError("sweep requires --budget")
    ids = _eval_ids(args, model)
    out = _out_dir(args, "sweep")
    _echo_config(rc, out)
    result = trajectory_sweep(
        model,
        ids,
        args.budget,
        stride=args.stride or rc.eval.stride or None,
        eval_tokens=args.eval_tokens or rc.eval.eval_tokens,
        diag_prompts=rc.diagnostics.prompts,
        tail_tokens=rc.diagnostics.tail_tokens,
    )
    path = _note_output(os.path.join(out, "sweep.csv"))
    result.write_csv(path)
    print(
        f"swept {len(result.records)} schedules at budget {result.budget}: "
        f"best=({result.best.schedule}) ppl={result.best.ppl:.6f} "
        f"worst=({result.worst.schedule}) ppl={result.worst.ppl:.6f} "
        f"spread={result.spread:.6f} csv={path}"
    )
    return 0


def cmd_diagnose(args) -> int:
    model, rc, _ = _load_model(args)
    budget = args.budget or rc.diagnostics.budget or model.config.max_loops
    traj = uniform_trajectory(budget)
    ids = _eval_ids(args, model)
    out = _out_dir(args, "diag")
    _echo_config(rc, out)
    prompts = _diag_prompts(ids, model.config.context_length, rc.diagnostics.prompts)
    series = report(collect_snapshots(model, prompts, traj, rc.diagnostics.tail_tokens))
    mpath = _note_output(os.path.join(out, "metrics.csv"))
    cpath = _note_output(os.path.join(out, "cka.csv"))
    write_metrics_csv(mpath, series)
    write_cka_csv(cpath, series["cka"])
    offdiag = mean_offdiag(series["cka"].values)
    print(
        f"diagnosed {len(prompts)} prompts at budget {budget}: "
        f"mean_offdiag_cka={offdiag:.6f} csv={mpath},{cpath}"
    )
    return 0


def cmd_generate(args) -> int:
    model, rc, _ = _load_model(args)
    traj = _resolve_trajectory(args, model, rc)
    if args.tokenizer == "char":
        if not args.data:
            raise ValueError("char tokenizer needs --data to rebuild its vocabulary")
        corpus = make_corpus(load_text(args.data), mode="char", val_fraction=args.val_fraction)
        tok = corpus.tokenizer
    else:
        tok = ByteTokenizer()
    prompt_ids = tok.encode(args.prompt)
    rng = np.random.default_rng(args.seed)
    out_ids = generate(model, prompt_ids, traj, args.max_new, args.temperature, rng)
    print(tok.decode_text(out_ids))
    return 0


def cmd_flops(args) -> int:
    if args.ckpt:
        model, rc, _ = _load_model(args)
        config = model.config
    else:
        rc = _resolve_config(args)
        config = rc.model
    out = _out_dir(args, "flops")
    _echo_config(rc, out)
    fm = flops_model(config, batch_size=args.batch_size)
    L = config.max_loops
    print(f"C_io = {fm.c_io:.6g}")
    print(f"C_1  = {fm.c_1:.6g}")
    print("ell  C(ell)")
    for ell in range(1, L + 1):
        print(f"{ell:<4d} {fm.flops(ell):.6g}")
    if L >= 2:
        print(f"training_overhead = {training_overhead(L, fm.c_io, fm.c_1):.6f}")
    return 0


# ---------------------------------------------------------------------- parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", help="configuration preset (desk, paper-1b)")
    p.add_argument("--config", default=None, help="config file layered over the preset")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--out", default=None, help=f"output directory (default ${RUN_DIR_ENV})")


def _add_data_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", nargs="+", required=required, help="plain-text input file(s)")
    p.add_argument("--tokenizer", choices=("byte", "char"), default="byte")
    p.add_argument("--val-fraction", type=float, default=0.1, dest="val_fraction")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--budget", type=int, default=0, help="loop budget M (default: max)")
    p.add_argument("--schedule", default=None, help="'uniform', 'max', or comma-joined steps")
    p.add_argument("--stride", type=int, default=0, help="perplexity window stride")
    p.add_argument("--eval-tokens", type=int, default=0, dest="eval_tokens")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopformer",
        description="shortcut-modulated looped transformer: train and probe desk-scale models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoints + metrics")
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint at a budget/schedule")
    _add_eval_flags(p)
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="rank every schedule at one budget by perplexity")
    _add_eval_flags(p)
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="representation metrics across loop steps")
    _add_eval_flags(p)
    _add_config_flags(p)
    _add_data_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("generate", help="sample text from a checkpoint")
    _add_eval_flags(p)
    _add_config_flags(p)
    _add_data_flags(p, required=False)
    p.add_argument("--prompt", required=True, help="prompt text")
    p.add_argument("--max-new", type=int, default=128, dest="max_new")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("flops", help="affine compute model C(ell) and training overhead")
    _add_config_flags(p)
    p.add_argument("--ckpt", default=None, help="read the model config from a checkpoint")
    p.add_argument("--batch-size", type=int, default=1, dest="batch_size")
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _partial_outputs.clear()
    try:
        return args.func(args)
    except (ValueError, ScheduleError, OSError, IndexError) as err:
        msg = " ".join(str(err).split()) or err.__class__.__name__
        print(f"error: {msg}", file=sys.stderr)
        _remove_partial_outputs()
        return 1


if __name__ == "__main__":
    sys.exit(main())
