"""``dlo`` command-line entry point.

Subcommands: ``init``, ``expand``, ``train``, ``eval``, ``flops``, ``trace``.
Set ``DLO_LOG_LEVEL`` (e.g. ``DEBUG``, ``WARNING``) to change log verbosity.
Exit status is 0 on success, 1 on a reported error and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import checkpoint
from . import tensor as T
from .config import RunConfig
from .errors import DLOError
from .expansion import POLICIES, ExpansionSpec, expand, expand_routers
from .flops import ARCH_PRESETS, flops_sparse, format_report, get_arch
from .layers import MODEL_PRESETS, init_model
from .model import RoutingMode
from .runner import check_task_fits, evaluate, export_trace, run_training
from .tasks import TaskSpec, generate

LOG_ENV = "DLO_LOG_LEVEL"
log = logging.getLogger("dlo")


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load(path) -> checkpoint.Checkpoint:
    header, _, _ = checkpoint.read_manifest(path)
    tensors = header.get("tensors") or []
    if tensors:
        T.set_precision("double" if tensors[0]["dtype"] == "<f8" else "single")
    return checkpoint.load(path)


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {value}")
    return value


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_init(args) -> int:
    T.set_precision(args.precision)
    base = MODEL_PRESETS[args.preset]
    changes = {k: getattr(args, k) for k in ("d_model", "n_heads", "d_ff", "n_layers", "vocab", "max_seq")
               if getattr(args, k) is not None}
    config = base.replace(**changes) if changes else base
    model = init_model(config, args.seed)
    checkpoint.save(args.out, model, provenance={"seed": args.seed, "preset": args.preset})
    print(f"wrote {args.out}: {config.n_layers} layers, d_model={config.d_model}")
    return 0


def cmd_expand(args) -> int:
    spec = ExpansionSpec(args.groups, args.per_group, args.policy, args.tau, args.alphas, args.alpha, args.seed)
    ckpt = _load(args.inp)
    n_before = ckpt.model.config.n_layers
    spec.group_size(n_before)
    routers = expand_routers(ckpt.routers, spec, n_before, ckpt.model.config.d_model)
    model = expand(ckpt.model, spec)
    provenance = dict(ckpt.provenance)
    provenance["expansions"] = list(provenance.get("expansions", [])) + [
        spec.to_dict() | {"layers_before": n_before, "layers_after": model.config.n_layers}
    ]
    checkpoint.save(args.out, model, routers, provenance=provenance)
    print(f"layers: {n_before} -> {model.config.n_layers}")
    return 0


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    result = run_training(config)
    print(json.dumps({"output_dir": str(result.output_dir), "steps": len(result.records)}
                     | result.report.to_dict()))
    return 0


def _task_for(args, model) -> tuple:
    spec = TaskSpec.parse(args.task)
    data = generate(spec)
    check_task_fits(model, data)
    return spec, data


def cmd_eval(args) -> int:
    ckpt = _load(args.ckpt)
    model = ckpt.model
    _, data = _task_for(args, model)
    routing = RoutingMode.parse(args.routing, model.config.n_layers, args.seed)
    split = data.eval if args.split == "eval" else data.train
    report = evaluate(model, ckpt.routers_or_zeros(), split, routing, args.batch_size)
    if args.json:
        print(json.dumps(report.to_dict()))
        return 0
    rows = [
        ("routing", args.routing),
        ("tokens", str(report.tokens)),
        ("loss", f"{report.loss:.6f}"),
        ("accuracy", f"{report.accuracy:.4f}"),
        ("rho_hat", " ".join(f"{r:.3f}" for r in report.rho_hat)),
        ("mean rho_hat", f"{np.mean(report.rho_hat):.4f}"),
        ("flops", f"{report.flops:.6e} (dense {report.dense_flops:.6e})"),
    ]
    width = max(len(k) for k, _ in rows)
    print("\n".join(f"{k.ljust(width)}  {v}" for k, v in rows))
    return 0


def cmd_flops(args) -> int:
    arch = get_arch(args.arch)
    report = flops_sparse(arch, args.seq, args.sparsity)
    print(format_report(report))
    print(json.dumps({"arch": args.arch} | report.to_dict()))
    return 0


def cmd_trace(args) -> int:
    ckpt = _load(args.ckpt)
    model = ckpt.model
    _, data = _task_for(args, model)
    routing = RoutingMode.parse(args.routing, model.config.n_layers, args.seed)
    split = data.eval if args.split == "eval" else data.train
    n = export_trace(args.out, model, ckpt.routers_or_zeros(), split, routing=routing,
                     batch_size=args.batch_size, max_batches=args.max_batches, sample=args.sample)
    print(f"wrote {n} records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlo", description="Layer expansion, routed MLP skipping and analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a freshly initialised model checkpoint")
    p.add_argument("--preset", choices=sorted(MODEL_PRESETS), default="toy")
    for name in ("d_model", "n_heads", "d_ff", "n_layers", "vocab", "max_seq"):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("single", "double"), default="single")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("expand", help="append new layers to each layer group")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, required=True)
    p.add_argument("--per-group", type=int, required=True)
    p.add_argument("--policy", choices=POLICIES, required=True)
    p.add_argument("--tau", type=int, default=2)
    p.add_argument("--alpha", type=_fraction, default=0.5, help="slerp interpolation weight")
    p.add_argument("--alphas", type=_floats, help="linear-merge weights, nearest layer first")
    p.add_argument("--seed", type=int, default=0, help="seed for the random policy")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("train", help="run a training job from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "evaluate a checkpoint on a task"),
                                  ("trace", cmd_trace, "export per-layer routing records")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--task", required=True, help="kind[:key=value,...], e.g. modular-addition:modulus=97")
        p.add_argument("--routing", default="inference", help="inference, always-on or random:<rate>[,<rate>...]")
        p.add_argument("--split", choices=("eval", "train"), default="eval")
        p.add_argument("--seed", type=int, default=0, help="seed for random routing")
        if name == "eval":
            p.add_argument("--batch-size", type=int, default=1024)
            p.add_argument("--json", action="store_true", help="print a single JSON object")
        else:
            p.add_argument("--out", required=True)
            p.add_argument("--batch-size", type=int, default=256)
            p.add_argument("--max-batches", type=int)
            p.add_argument("--sample", type=int, default=4, help="sequences per batch in the token maps")
        p.set_defaults(func=func)

    p = sub.add_parser("flops", help="analytic inference FLOPs")
    p.add_argument("--arch", choices=sorted(ARCH_PRESETS), required=True)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--sparsity", type=_fraction, default=0.0)
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DLOError as exc:
        print(f"dlo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
