"""``ccra`` command line: forward, gradcheck, heatmap, variants, params.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O or shape error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io
from .conditioning import TextEmbeddings
from .errors import CcraError, ConfigError
from .lpwca import VisualStack
from .numerics import Tensor
from .pipeline import VARIANTS, count_parameters, evaluate, gradient_check, init_params, synth_inputs

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ShapeError(CcraError):
    pass


def _load_inputs(cfg, visual_path, text_path):
    text, vs, _ = synth_inputs(cfg, cfg.seed)
    if visual_path is not None:
        arr = io.read_tensor(visual_path)
        if arr.shape != (cfg.L, cfg.N, cfg.d):
            raise ShapeError(f"visual tensor shape {arr.shape} != expected ({cfg.L}, {cfg.N}, {cfg.d})")
        vs = VisualStack(Tensor(arr))
    if text_path is not None:
        arr = io.read_tensor(text_path)
        if arr.shape != (cfg.T, cfg.d):
            raise ShapeError(f"text tensor shape {arr.shape} != expected ({cfg.T}, {cfg.d})")
        text = TextEmbeddings(Tensor(arr))
    return text, vs


def write_trace(trace, out_dir):
    out = Path(out_dir)
    io.write_tensor(out / "fused.ct", trace.F_fused.data)
    io.write_tensor(out / "projected.ct", trace.projected.data)
    io.write_tensor(out / "logits.ct", trace.logits.data)
    io.write_tensor(out / "wlp.ct", trace.W_lp.data)
    io.write_tensor(out / "wp.ct", trace.w_p.data)
    io.atomic_write(out / "wl.csv", io.format_columns(
        ["layer", "raw", "smoothed"], [trace.w_l_raw.data, trace.w_l_smoothed.data]))
    io.atomic_write(out / "wp.csv", io.format_columns(["patch", "weight"], [trace.w_p.data]))
    io.atomic_write(out / "alpha.csv", io.format_columns(["token", "weight"], [trace.alpha.data]))


def _dims(t):
    return "x".join(str(s) for s in t.shape)


def cmd_forward(args) -> int:
    cfg = io.load_config(args.config, seed=args.seed)
    text, vs = _load_inputs(cfg, args.visual, args.text)
    params = init_params(cfg)
    trace = evaluate(params, text, vs, cfg)
    write_trace(trace, args.out)
    print(f"{cfg.variant}: fused {_dims(trace.F_fused)} projected {_dims(trace.projected)} "
          f"logits {_dims(trace.logits)} wlp {_dims(trace.W_lp)} wl {_dims(trace.w_l_smoothed)} "
          f"wp {_dims(trace.w_p)} alpha {_dims(trace.alpha)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if not (args.eps > 0 and args.tol >= 0):
        raise ConfigError("eps must be positive and tol non-negative")
    cfg = io.load_config(args.config, seed=args.seed)
    report = gradient_check(cfg, eps=args.eps)
    failing = []
    for group, err in report.items():
        ok = err < args.tol
        print(f"{group:<13} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failing.append(group)
    if failing:
        print(f"gradient check failed for: {', '.join(failing)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_heatmap(args) -> int:
    data = io.read_tensor(args.map)
    if args.select == "patch":
        values = data.reshape(-1)
    else:
        try:
            layer = int(args.select)
        except ValueError:
            raise ShapeError(f"selector must be a layer index or 'patch', got {args.select!r}") from None
        if data.ndim != 2 or not 0 <= layer < data.shape[0]:
            raise ShapeError(f"layer index {layer} out of range for map of shape {data.shape}")
        values = data[layer]
    grid = io.square_grid(values)
    blob = io.encode_pgm(grid) if args.format == "pgm" else io.encode_grid_csv(grid)
    io.atomic_write(args.out, blob)
    return EXIT_OK


def cmd_variants(args) -> int:
    cfg = io.load_config(args.config, seed=args.seed)
    text, vs, _ = synth_inputs(cfg, cfg.seed)
    params = init_params(cfg)
    fused = {}
    for mode in VARIANTS:
        trace = evaluate(params, text, vs, cfg, mode)
        write_trace(trace, Path(args.out) / mode)
        fused[mode] = trace.F_fused.data
    pairs = [("pai", "pai"), ("pai", "decoupled"), ("pai", "shuffled"), ("decoupled", "shuffled")]
    for a, b in pairs:
        print(f"{a} vs {b}: {np.abs(fused[a] - fused[b]).max():.6g}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = io.load_config(args.config, seed=args.seed)
    for group, n in count_parameters(cfg).items():
        print(f"{group}: {n}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccra", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", default=None, help="key=value run config (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="overrides CCRA_SEED and the config file")
        return p

    p = with_config(sub.add_parser("forward", help="run one forward pass and write its trace"))
    p.add_argument("--visual", help="CT1 tensor of shape (L, N, d)")
    p.add_argument("--text", help="CT1 tensor of shape (T, d)")
    p.add_argument("--out", default="ccra_out", help="output directory")
    p.set_defaults(func=cmd_forward)

    p = with_config(sub.add_parser("gradcheck", help="compare backprop against central differences"))
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("heatmap", help="render one row of an attention map as a square image")
    p.add_argument("map", help="CT1 map file, e.g. wlp.ct (L x N) or wp.ct (N)")
    p.add_argument("select", help="layer index into an (L, N) map, or 'patch' for an N-vector")
    p.add_argument("out", help="output path")
    p.add_argument("--format", choices=("pgm", "csv"), default="pgm")
    p.set_defaults(func=cmd_heatmap)

    p = with_config(sub.add_parser("variants", help="run pai/decoupled/shuffled on one input"))
    p.add_argument("--out", default="ccra_variants", help="output directory")
    p.set_defaults(func=cmd_variants)

    p = with_config(sub.add_parser("params", help="report trainable parameter counts"))
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CcraError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
