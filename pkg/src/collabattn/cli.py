"""Command-line entry point: ``collabattn <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis
from .attention import (
    AttentionDims,
    ConcatMHAParams,
    collab_mha_forward,
    concat_mha_forward,
)
from .bundle import (
    bundle_from_collab,
    bundle_from_concat,
    collab_layers,
    concat_layers,
    load_bundle,
    save_bundle,
)
from .decompose import ALSConfig, Init, reparametrize
from .errors import BundleError, NumericalError, ShapeError
from .grad import Mode, ToyTask, ToyTaskConfig, init_collab, train_toy

log = logging.getLogger("collabattn")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
THREADS_ENV = "COLLABATTN_THREADS"
ENERGY_THRESHOLDS = (0.80, 0.90, 0.99)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _jobs(args) -> int:
    if getattr(args, "jobs", None):
        return args.jobs
    return int(os.environ.get(THREADS_ENV, "1"))


def _map_layers(fn, items, jobs: int) -> list:
    if jobs <= 1:
        return [fn(i, x) for i, x in enumerate(items)]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, range(len(items)), items))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_spectrum_csv(path: Path, spec: analysis.EnergySpectrum) -> None:
    lines = ["index,sigma,cumulative_energy"]
    for k, (s, e) in enumerate(zip(spec.singular_values, spec.cumulative_energy), start=1):
        lines.append(f"{k},{_fmt(s)},{_fmt(e)}")
    path.write_text("\n".join(lines) + "\n")


def _dims_summary(spec: analysis.EnergySpectrum) -> dict:
    return {f"{t:.2f}": analysis.shared_dim_for_energy(spec, t) for t in ENERGY_THRESHOLDS}


# -- subcommands --------------------------------------------------------------


def cmd_init(args) -> int:
    """Write a random concat-form bundle, optionally with shared key/query structure."""
    dims = AttentionDims(args.d_in, args.d_out or args.d_in, args.heads, args.d_k, args.d_v or args.d_k)
    rng = np.random.default_rng(args.seed)
    layers = []
    for _ in range(args.layers):
        p = ConcatMHAParams.random(dims, rng, bias_scale=args.bias_scale)
        if args.shared_rank:
            p = _impose_shared_rank(p, args.shared_rank, rng)
        layers.append(p)
    save_bundle(bundle_from_concat(layers), args.out)
    print(f"wrote {args.layers} layer(s) to {args.out}")
    return EXIT_OK


def _impose_shared_rank(p: ConcatMHAParams, r: int, rng: np.random.Generator) -> ConcatMHAParams:
    # Head i gets W_Q = U diag(m_i) G_i, W_K = V G_i with orthonormal-row G_i,
    # so every W_Q^(i) W_K^(i)^T = U diag(m_i) V^T lies in one rank-r CP model.
    d = p.dims
    if r > d.d_k:
        raise ValueError(f"--shared-rank {r} exceeds per-head width {d.d_k}")
    u = rng.standard_normal((d.d_in, r)) / np.sqrt(d.d_in)
    v = rng.standard_normal((d.d_in, r)) / np.sqrt(d.d_in)
    m = rng.standard_normal((d.n_heads, r))
    w_q = np.empty_like(p.w_q)
    w_k = np.empty_like(p.w_k)
    for i in range(d.n_heads):
        g = np.linalg.qr(rng.standard_normal((d.d_k, d.d_k)))[0][:r]
        s = p.head_slice(i)
        w_q[:, s] = (u * m[i]) @ g
        w_k[:, s] = v @ g
    return ConcatMHAParams(d, w_q, w_k, p.w_v, p.w_o, p.b_q, p.b_k)


def cmd_analyze(args) -> int:
    layers = concat_layers(load_bundle(args.bundle))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(i, p):
        entry = {}
        spec = analysis.layer_spectrum(p)
        write_spectrum_csv(out / f"layer{i}.csv", spec)
        entry["layer"] = _dims_summary(spec)
        if not args.no_heads:
            heads = []
            for h in range(p.dims.n_heads):
                hs = analysis.head_spectrum(p, h)
                write_spectrum_csv(out / f"layer{i}_head{h}.csv", hs)
                heads.append(_dims_summary(hs))
            entry["heads"] = heads
        if args.stacked:
            ss = analysis.stacked_spectrum(p, mode=1)
            write_spectrum_csv(out / f"layer{i}_stacked.csv", ss)
            entry["stacked"] = _dims_summary(ss)
        return entry

    summary = {
        "d_k_total": layers[0].dims.d_k_total,
        "thresholds": [f"{t:.2f}" for t in ENERGY_THRESHOLDS],
        "layers": _map_layers(one, layers, _jobs(args)),
    }
    _write_json(out / "summary.json", summary)
    print(f"wrote spectra for {len(layers)} layer(s) to {out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    layers = concat_layers(load_bundle(args.bundle))
    dims = layers[0].dims
    rank = args.rank if args.rank is not None else dims.d_k_total
    if args.exact and rank != dims.d_k_total:
        raise ValueError(f"--exact requires --rank == N_h * d_k = {dims.d_k_total}, got {rank}")

    def one(i, p):
        cfg = ALSConfig(
            rank=rank,
            tol=args.tol,
            max_iters=args.max_iters,
            init=Init(args.init),
            rng_seed=args.seed + i,
        )
        return reparametrize(p, cfg, exact=args.exact)

    results = _map_layers(one, layers, _jobs(args))
    save_bundle(bundle_from_collab([c for c, _ in results]), args.out)

    cost = analysis.param_count(dims, rank)
    report = {
        "rank": rank,
        "exact": bool(args.exact),
        "init": args.init,
        "tol": args.tol,
        "seed": args.seed,
        "layers": [{"layer": i, "rel_error": err} for i, (_, err) in enumerate(results)],
        "params_per_layer": {"concat": cost.params_concat, "collab": cost.params_collab},
        "compression_ratio": cost.compression_ratio,
    }
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".json")
    _write_json(report_path, report)
    worst = max(err for _, err in results)
    print(f"compressed {len(layers)} layer(s) to rank {rank}; worst rel_error {worst:.3e}")
    return EXIT_OK


def cmd_verify(args) -> int:
    concat = concat_layers(load_bundle(args.concat))
    collab = collab_layers(load_bundle(args.collab))
    if len(concat) != len(collab):
        raise ValueError(f"layer count mismatch: {len(concat)} vs {len(collab)}")
    rng = np.random.default_rng(args.seed)
    deviations = []
    for i, (p, c) in enumerate(zip(concat, collab)):
        if p.dims != c.dims:
            raise ValueError(f"layer {i}: dims differ ({p.dims} vs {c.dims})")
        worst = 0.0
        for _ in range(args.trials):
            x = rng.standard_normal((args.tokens, p.dims.d_in))
            y = rng.standard_normal((args.tokens, p.dims.d_in))
            dev = np.max(np.abs(concat_mha_forward(p, x, y) - collab_mha_forward(c, x, y)))
            worst = max(worst, float(dev))
        deviations.append(worst)
    ok = all(d <= args.tol for d in deviations)
    print(json.dumps({"tol": args.tol, "max_abs_deviation": deviations, "pass": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_VALIDATION


def _time(fn, reps: int) -> tuple[float, float]:
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), statistics.stdev(samples) if reps > 1 else 0.0


def cmd_bench(args) -> int:
    d_k = args.d_k or max(1, args.d_in // args.heads)
    dims = AttentionDims(args.d_in, args.d_in, args.heads, d_k, d_k)
    rank = args.rank or dims.d_k_total
    rng = np.random.default_rng(args.seed)
    p = ConcatMHAParams.random(dims, rng)
    c = init_collab(dims, rank, rng)
    x = rng.standard_normal((args.t, args.d_in))
    med_a, sd_a = _time(lambda: concat_mha_forward(p, x, x), args.reps)
    med_b, sd_b = _time(lambda: collab_mha_forward(c, x, x), args.reps)
    cost = analysis.flop_count(dims, args.t, rank)
    print(f"{'form':<8}{'median_ms':>12}{'stdev_ms':>12}{'score_flops':>16}{'params':>12}")
    print(f"{'concat':<8}{med_a * 1e3:>12.3f}{sd_a * 1e3:>12.3f}{cost.flops_concat:>16d}{cost.params_concat:>12d}")
    print(f"{'collab':<8}{med_b * 1e3:>12.3f}{sd_b * 1e3:>12.3f}{cost.flops_collab:>16d}{cost.params_collab:>12d}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = ToyTaskConfig(
        task=ToyTask(args.task),
        t_tokens=args.t,
        d_in=args.d_in,
        n_heads=args.heads,
        d_k_shared=args.rank,
        steps=args.steps,
        learning_rate=args.lr,
        rng_seed=args.seed,
        n_samples=args.samples,
    )
    curve = train_toy(cfg, Mode(args.mode))
    lines = ["step,loss"] + [f"{s},{_fmt(v)}" for s, v in enumerate(curve)]
    Path(args.out).write_text("\n".join(lines) + "\n")
    ratio = curve[-1] / curve[0] if curve[0] else 0.0
    print(f"initial {curve[0]:.6g} final {curve[-1]:.6g} ratio {ratio:.6g}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collabattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="write a random concat-form bundle")
    p.add_argument("out")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--d-out", type=int, default=None)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-k", type=int, default=4)
    p.add_argument("--d-v", type=int, default=None)
    p.add_argument("--bias-scale", type=float, default=0.1)
    p.add_argument("--shared-rank", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("analyze", help="key/query energy spectra")
    p.add_argument("bundle")
    p.add_argument("out", help="output directory for CSV files and summary.json")
    p.add_argument("--stacked", action="store_true", help="also the mode-1 unfolding of the stacked tensor")
    p.add_argument("--no-heads", action="store_true", help="skip per-head spectra")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compress", help="convert to collaborative form")
    p.add_argument("bundle")
    p.add_argument("out")
    p.add_argument("--rank", type=int, default=None, help="shared key/query dimension (default N_h*d_k)")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=[i.value for i in Init], default=Init.RANDOM_UNIFORM.value)
    p.add_argument("--exact", action="store_true", help="lossless expansion, needs rank == N_h*d_k")
    p.add_argument("--report", default=None, help="JSON report path (default <out>.json)")
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("verify", help="compare concat and collab forwards")
    p.add_argument("concat")
    p.add_argument("collab")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="time concat vs collab forwards")
    p.add_argument("--t", type=int, default=128)
    p.add_argument("--d-in", type=int, default=768)
    p.add_argument("--heads", type=int, default=12)
    p.add_argument("--d-k", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train-toy", help="gradient descent on a toy attention task")
    p.add_argument("out", help="loss curve CSV")
    p.add_argument("--task", choices=[t.value for t in ToyTask], default=ToyTask.ATTEND_TO_MARKER.value)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.COLLAB.value)
    p.add_argument("--t", type=int, default=8)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (BundleError, ShapeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
