"""``averis-lab`` command line.

Every command prints its resolved configuration, runs, prints the report and
optionally writes it to ``--out``. Exit status: 0 on success, 1 when a checked
bound or property fails, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import sys

import numpy as np

from . import averis, decomposition, extreme_stats, tensorio, trainer
from .linalg import ContractError, truncated_svd
from .quantizer import LAYOUTS, ROUNDING_MODES, SCALE_MODES, QuantConfig
from .rng import SEED_ENV_VAR, make_rng, resolve_seed

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so ``run`` can return 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _common(p):
    p.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV_VAR} or 0)")
    p.add_argument("--out", default=None, help="also write the report to this path")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--no-timestamp", action="store_true", help="omit timestamp and timing fields")
    p.add_argument("--threads", type=int, default=1, help="worker cap for Monte Carlo sampling")


def _quant_flags(p):
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--rounding", choices=ROUNDING_MODES, default="stochastic")
    p.add_argument("--scale-mode", choices=SCALE_MODES, default="real")
    p.add_argument("--layout", choices=LAYOUTS, default="row")


def _input_flags(p):
    p.add_argument("--input", default=None, help="AVTS activation file; a synthetic matrix is used if omitted")
    p.add_argument("--k", default="auto", help="spike rank, integer or 'auto' (max(1, floor(0.01 m)))")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="averis-lab", description="Mean-bias analysis and FP4 emulation experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    for name, hlp in (
        ("decompose", "mean / spike / tail energy decomposition"),
        ("attribute", "attribute the largest entries to mean, spike and tail"),
        ("diagnose", "mean-bias diagnostics (R ratio, sign coherence, alignment with v1)"),
    ):
        p = sub.add_parser(name, help=hlp)
        _common(p)
        _input_flags(p)

    p = sub.add_parser("quant-error", help="FP4 forward error, mean-residual vs vanilla")
    _common(p)
    _quant_flags(p)
    p.add_argument("--input", default=None, help="AVTS activation file (default: synthetic mean-dominated input)")
    p.add_argument("--l", type=int, default=1024)
    p.add_argument("--m", type=int, default=256)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--mean-std", type=float, default=5.0)
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("verify-theorems", help="Monte Carlo checks of the extreme-value bounds")
    _common(p)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--count-trials", type=int, default=1000)
    p.add_argument("--l", type=int, default=1024)
    p.add_argument("--shift-quantile", choices=("stated", "corrected"), default="stated")

    p = sub.add_parser("train", help="toy training run")
    _common(p)
    _quant_flags(p)
    d = trainer.TrainConfig()
    p.add_argument("--mode", choices=trainer.MODES, default=d.mode)
    p.add_argument("--task", choices=(*trainer.TASK_ALIASES, *trainer.TASKS), default="biased")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch", type=int, default=d.batch)
    p.add_argument("--seq", type=int, default=d.seq)
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--depth", type=int, default=d.depth)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--mean-ratio", type=float, default=d.mean_ratio)
    p.add_argument("--nonlinearity", choices=("relu", "tanh", "identity"), default=d.nonlinearity)
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--full-precision-grads", action="store_true", help="leave gradient operands unquantized")
    p.add_argument("--log-every", type=int, default=d.log_every)

    p = sub.add_parser("scaling-check", help="slope of log ||mu|| against log H")
    _common(p)
    p.add_argument("--h", default="64,256,1024,4096", help="comma-separated hidden sizes")
    p.add_argument("--mu-bar", type=float, default=0.1)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--sigma", type=float, default=1.0)

    p = sub.add_parser("zipf-demo", help="mean embedding under Zipf vs uniform token frequencies")
    _common(p)
    p.add_argument("--vocab", type=int, default=1000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--exponent", type=float, default=1.0)
    p.add_argument("--aligned-top", type=int, default=10)
    return parser


# ---------------------------------------------------------------- helpers


def _load(args) -> tuple[np.ndarray, str]:
    if args.input:
        return tensorio.read_matrix(args.input), args.input
    x = decomposition.anisotropic_activations(seed=args.seed)
    return x, "synthetic:anisotropic_activations(l=1024, m=256)"


def _rank(args, m: int) -> int:
    if args.k == "auto":
        return decomposition.default_rank(m)
    try:
        k = int(args.k)
    except ValueError:
        raise _UsageError(f"--k must be an integer or 'auto', got {args.k!r}") from None
    if k < 1:
        raise _UsageError("--k must be >= 1")
    return k


def _qcfg(args) -> QuantConfig:
    return QuantConfig(
        block_size=args.block_size, rounding=args.rounding, scale_mode=args.scale_mode,
        layout=args.layout, seed=args.seed,
    )


# ---------------------------------------------------------------- commands
# Each returns (report dict, csv rows, ok flag).


def cmd_decompose(args):
    x, src = _load(args)
    k = _rank(args, x.shape[1])
    d = decomposition.decompose(x, k=k, seed=args.seed)
    rep = {"input": src, **d.summary()}
    return rep, [rep], True


def cmd_attribute(args):
    x, src = _load(args)
    d = decomposition.decompose(x, k=_rank(args, x.shape[1]), seed=args.seed)
    a = decomposition.attribute_outliers(x, d)
    rows = a.rows()
    rep = {"input": src, "k": d.k, "outliers": len(rows), "aggregate": a.aggregate, "entries": rows}
    return rep, rows, True


def cmd_diagnose(args):
    x, src = _load(args)
    k = _rank(args, x.shape[1])
    svd = truncated_svd(x, k, seed=args.seed)
    centered = truncated_svd(x - x.mean(axis=0), k, seed=args.seed)
    diag = decomposition.mean_diagnostics(x, svd=svd, centered_svd=centered)
    rep = {"input": src, "k": k, **diag.summary()}
    return rep, [{k_: v for k_, v in rep.items() if k_ != "alpha"}], True


def cmd_quant_error(args):
    cfg = _qcfg(args)
    if args.input:
        x = tensorio.read_matrix(args.input)
        w = make_rng(args.seed, 0xE8).standard_normal((x.shape[1], args.n)) / np.sqrt(x.shape[1])
        src = args.input
    else:
        x, w = averis.mean_dominated_inputs(args.l, args.m, args.n, args.mean_std, args.sigma, args.seed)
        src = "synthetic:mean_dominated_inputs"
    errs = averis.forward_errors(x, w, cfg)
    rep = {"input": src, "shape": list(x.shape), "n": int(w.shape[1]), **errs}
    return rep, [rep], True


def cmd_verify_theorems(args):
    rows = extreme_stats.theorem_suite(
        trials=args.trials, count_trials=args.count_trials, seed=args.seed,
        threads=args.threads, shift_quantile=args.shift_quantile, l=args.l,
    )
    ok = all(r["holds"] for r in rows)
    failed = sum(not r["holds"] for r in rows)
    print(f"{'thm':>3}  {'check':<28} {'params':<42} {'empirical':>12} {'rel':>3} {'bound':>12}  ok")
    for r in rows:
        print(f"{r['theorem']:>3}  {r['check']:<28} {r['params']:<42} {r['empirical']:>12.6g} "
              f"{r['relation']:>3} {r['bound']:>12.6g}  {'yes' if r['holds'] else 'NO'}")
    rep = {"checks": len(rows), "failed": failed, "all_hold": ok, "rows": rows}
    return rep, rows, ok


def cmd_train(args):
    cfg = trainer.TrainConfig(
        mode=args.mode, task=args.task, steps=args.steps, batch=args.batch, seq=args.seq,
        hidden=args.hidden, depth=args.depth, lr=args.lr, seed=args.seed, mean_ratio=args.mean_ratio,
        quant=_qcfg(args), quantize_grads=not args.full_precision_grads, log_every=args.log_every,
        nonlinearity=args.nonlinearity, residual=not args.no_residual,
    )
    model = trainer.init_model(cfg.hidden, cfg.depth, nonlinearity=cfg.nonlinearity,
                               residual=cfg.residual, seed=cfg.seed)
    log = trainer.train(model, cfg)
    rep = log.summary()
    if args.no_timestamp:
        rep.pop("wall_time", None)
    rows = [{"step": i, "loss": v} for i, v in enumerate(log.losses)]
    return rep, rows, not log.diverged


def cmd_scaling_check(args):
    try:
        hs = [int(v) for v in args.h.split(",") if v.strip()]
    except ValueError:
        raise _UsageError(f"--h must be comma-separated integers, got {args.h!r}") from None
    slope = extreme_stats.dimension_scaling_check(hs, args.mu_bar, args.tokens, args.seed, args.sigma)
    norms = extreme_stats.mean_norm_by_dimension(sorted(set(hs)), args.mu_bar, args.tokens, args.seed, args.sigma)
    ok = 0.45 <= slope <= 0.55
    rep = {"h": sorted(set(hs)), "mean_norms": norms, "slope": slope, "expected": 0.5, "within_band": ok}
    rows = [{"h": h, "mean_norm": v} for h, v in zip(rep["h"], norms)]
    return rep, rows, ok


def cmd_zipf_demo(args):
    _, u = extreme_stats.embedding_table(args.vocab, args.dim, args.seed, args.aligned_top)
    out = {}
    for label, uniform in (("zipf", False), ("uniform", True)):
        mu = extreme_stats.zipf_embedding_mean(args.vocab, args.exponent, args.dim, args.seed,
                                               args.aligned_top, uniform=uniform)
        norm = float(np.linalg.norm(mu))
        out[label] = {"mean_norm": norm, "cos_to_aligned": float(abs(mu @ u) / norm) if norm > 0 else 0.0}
    rep = {**out, "norm_ratio": out["zipf"]["mean_norm"] / out["uniform"]["mean_norm"]}
    rows = [{"weights": k, **v} for k, v in out.items()]
    return rep, rows, True


COMMANDS = {
    "decompose": cmd_decompose,
    "attribute": cmd_attribute,
    "diagnose": cmd_diagnose,
    "quant-error": cmd_quant_error,
    "verify-theorems": cmd_verify_theorems,
    "train": cmd_train,
    "scaling-check": cmd_scaling_check,
    "zipf-demo": cmd_zipf_demo,
}


def _resolved(args) -> dict:
    cfg = {k: v for k, v in vars(args).items()}
    return {"command": cfg.pop("command"), **dict(sorted(cfg.items()))}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    args.seed = resolve_seed(args.seed)
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    config = _resolved(args)
    print("config: " + tensorio.to_json(config).strip().replace("\n", "\n        "))
    try:
        report, rows, ok = COMMANDS[args.command](args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, tensorio.TensorFormatError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    doc = {"config": config}
    if not args.no_timestamp:
        doc["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    doc["status"] = "ok" if ok else "failed"
    doc["report"] = report
    text = tensorio.to_json(doc) if args.format == "json" else tensorio.to_csv(rows)
    if args.command != "train" or args.format == "json" or args.out is None:
        sys.stdout.write(text)
    if args.out:
        try:
            tensorio.write_text(args.out, text)
        except OSError as e:
            print(f"error: cannot write {args.out}: {e}", file=sys.stderr)
            return EXIT_USAGE
    return EXIT_OK if ok else EXIT_FAIL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
