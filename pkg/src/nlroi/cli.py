"""Command-line entry point.

Subcommands: gradcheck, bench, train, eval, oracle-diff, init. Data (CSV,
ACCURACY, GRADCHECK, oracle-diff values) goes to stdout; progress and
tables go to stderr. Exit codes: 0 success (and, where applicable, the
checked property holds), 1 internal error or failed check precondition,
2 usage error.
"""

from __future__ import annotations

import argparse
import sys

from .bench import DEFAULT_SWEEP, MIN_REPS, emit_csv, run_bench
from .config import ConfigFile, parse_config
from .errors import (
    ConfigError,
    DegenerateAttentionError,
    DimensionError,
    DivergenceError,
    InsufficientDataError,
    NumericalError,
    ResourceError,
    WeightsFormatError,
)
from .gradcheck import check_all_gradients, format_report, summary_line
from .operator import (
    NlRoiConfig,
    NlRoiParams,
    Scaling,
    init_params,
    nlroi_forward,
    nlroi_reference,
)
from .rng import Prng
from .toytask import ToyModel, evaluate, init_model, train
from .weights import load_weights, save_weights

ORACLE_TOL = 1e-9

_HANDLED = (
    ConfigError,
    DegenerateAttentionError,
    DimensionError,
    DivergenceError,
    InsufficientDataError,
    NumericalError,
    ResourceError,
    WeightsFormatError,
    OSError,
)


def _load_config(args) -> ConfigFile:
    if args.config is None:
        return parse_config("")
    with open(args.config, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _seed(args, cfg: ConfigFile) -> int:
    return cfg.seed if args.seed is None else args.seed


def _model_tensors(model: ToyModel) -> list:
    named = [("w_head", model.w_head), ("b_head", model.b_head)]
    if model.nlroi_params is not None:
        named += model.nlroi_params.tensors()
    return named


def _model_from_weights(named: dict, cfg: ConfigFile) -> ToyModel:
    spec = cfg.scene_spec()
    if "w_phi" in named:
        nl_config = cfg.nlroi_config()
        nl_params = NlRoiParams.from_named(named)
        nl_params.validate(nl_config)
        head_in = cfg.d + cfg.d_g
    else:
        nl_config = None
        nl_params = None
        head_in = cfg.d
    try:
        w_head = named["w_head"]
        b_head = named["b_head"]
    except KeyError as exc:
        raise WeightsFormatError(f"weights file lacks tensor {exc.args[0]!r}") from None
    if w_head.shape != (cfg.k_classes, head_in) or b_head.shape != (cfg.k_classes,):
        raise DimensionError(
            f"head tensors {w_head.shape}/{b_head.shape} do not fit the "
            f"configuration (k={cfg.k_classes}, pooled width {head_in})"
        )
    return ToyModel(
        spec=spec,
        nlroi_config=nl_config,
        nlroi_params=nl_params,
        w_head=w_head,
        b_head=b_head,
    )


def _cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    report = check_all_gradients(cfg.nlroi_config(), seed=_seed(args, cfg), n=cfg.n)
    print(format_report(report), file=sys.stderr)
    print(summary_line(report))
    return 0 if report.passed else 1


def _cmd_bench(args) -> int:
    cfg = _load_config(args)
    if args.reps < MIN_REPS:
        raise ConfigError(f"--reps must be >= {MIN_REPS}, got {args.reps}")
    records = run_bench(DEFAULT_SWEEP, reps=args.reps, seed=_seed(args, cfg))
    if args.out is None:
        emit_csv(records, sys.stdout)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            emit_csv(records, fh)
        print(f"wrote {len(records)} records to {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    spec = cfg.scene_spec()
    nl_config = cfg.nlroi_config() if args.variant == "nlroi" else None

    def log(step, loss):
        print(f"step={step} loss={loss:.6f}", file=sys.stderr)

    model, _ = train(
        args.variant,
        spec,
        nl_config,
        cfg.hyper(),
        seed=_seed(args, cfg),
        log_fn=log,
    )
    out = args.out if args.out is not None else "weights.bin"
    save_weights(out, _model_tensors(model))
    print(f"saved {args.variant} weights to {out}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    model = _model_from_weights(load_weights(args.weights), cfg)
    acc = evaluate(model, scenes=args.scenes, seed=_seed(args, cfg))
    print(f"ACCURACY {acc:.6f}")
    return 0


def _random_oracle_case(prng: Prng, index: int):
    """Deterministic mode coverage: consecutive indices cycle through
    masking and scaling; sizes are drawn from the PRNG."""
    n = 1 + prng.randint(16)
    d = 4 + prng.randint(13)
    h = 1 + prng.randint(5)
    w = 1 + prng.randint(5)
    d_f = 1 + prng.randint(max(1, d // 2))
    d_mid = 1 + prng.randint(max(1, d // 2))
    d_g = 1 + prng.randint(6)
    attend = index % 2 == 0 or n == 1
    scaling = Scaling.PER_CHANNEL if index % 4 < 2 else Scaling.FULL_FLATTEN
    config = NlRoiConfig(
        d=d, d_f=d_f, d_mid=d_mid, d_g=d_g, h=h, w=w,
        attend_to_self=attend, scaling=scaling,
    )
    params = init_params(config, prng)
    x = prng.normals(n * d * h * w).reshape(n, d, h, w)
    return x, params, config


def _cmd_oracle_diff(args) -> int:
    import numpy as np

    cfg = _load_config(args)
    prng = Prng(_seed(args, cfg))
    worst = 0.0
    for i in range(args.count):
        x, params, config = _random_oracle_case(prng, i)
        out, _ = nlroi_forward(x, params, config)
        ref = nlroi_reference(x, params, config)
        diff = float(np.max(np.abs(out - ref))) if out.size else 0.0
        worst = max(worst, diff)
    print(f"{worst:.6e}")
    return 0 if worst < ORACLE_TOL else 1


def _cmd_init(args) -> int:
    cfg = _load_config(args)
    prng = Prng(_seed(args, cfg))
    spec = cfg.scene_spec()
    nl_config = cfg.nlroi_config() if args.variant == "nlroi" else None
    model = init_model(spec, nl_config, prng)
    out = args.out if args.out is not None else "weights.bin"
    save_weights(out, _model_tensors(model))
    print(f"saved fresh {args.variant} weights to {out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key=value configuration file")
    common.add_argument(
        "--seed", type=int, help="PRNG seed (overrides the config file's seed)"
    )
    common.add_argument("--out", help="output path")

    parser = argparse.ArgumentParser(
        prog="nlroi",
        description="non-local RoI attention operator: checks, benchmarks, toy training",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser(
        "gradcheck", parents=[common],
        help="compare analytic gradients against finite differences",
    ).set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser(
        "bench", parents=[common], help="time forward/backward over an N sweep (CSV)"
    )
    p.add_argument("--reps", type=int, default=MIN_REPS, help="repetitions per size")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("train", parents=[common], help="train a toy-task variant")
    p.add_argument("--variant", choices=("baseline", "nlroi"), required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate saved weights")
    p.add_argument("--weights", default="weights.bin", help="weights file to load")
    p.add_argument("--scenes", type=int, default=1000, help="evaluation scene count")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser(
        "oracle-diff", parents=[common],
        help="max |forward - reference| over random configurations",
    )
    p.add_argument("--count", type=int, default=100, help="random configurations")
    p.set_defaults(fn=_cmd_oracle_diff)

    p = sub.add_parser("init", parents=[common], help="write freshly initialized weights")
    p.add_argument("--variant", choices=("baseline", "nlroi"), default="nlroi")
    p.set_defaults(fn=_cmd_init)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _HANDLED as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
