"""Command-line entry point: gen, train, eval, bench and selftest.

Every run is described by one declarative ``key = value`` file whose keys
are namespaced ``data.*``, ``net.*`` or ``train.*``; flags override it.
Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import selftest
from .bench import DEFAULT_POINTS, run_bench
from .data import CameraModel, DataError, SceneSpec, checksum, gen_scene, list_pairs, preprocess, read_pair, write_pair
from .metrics import compute_metrics
from .model import (
    ABLATIONS,
    TRAIN_RECIPE,
    CheckpointError,
    NetworkConfig,
    NumericalError,
    ablation_variant,
    evaluate,
    fit_base_scale,
    parse_keyvalue,
    read_checkpoint,
    train_recipe,
    write_checkpoint,
)

log = logging.getLogger("latticeflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

TRAIN_DEFAULTS = {**TRAIN_RECIPE, "eval_every": 0}
DATA_DEFAULTS = {"pairs": 5, "points": 2048, "depth_max": 35.0, "ground_height": None}


class ConfigError(DataError):
    """A configuration file or override is malformed."""


class UsageError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    spec: SceneSpec
    net: dict
    train: dict
    data: dict

    def network(self, base_scale: float | None = None) -> NetworkConfig:
        values = dict(self.net)
        if values.get("base_scale", "auto") == "auto":
            if base_scale is None:
                raise ConfigError("net.base_scale=auto needs training data to fit the scale")
            values["base_scale"] = base_scale
        try:
            return NetworkConfig.from_mapping(values)
        except ValueError as exc:
            raise ConfigError(f"bad network configuration: {exc}") from None

    def to_text(self, net: NetworkConfig | None = None) -> str:
        lines = []
        for k, v in dataclasses.asdict(self.spec).items():
            lines.append(f"data.{k}={_fmt_value(v)}")
        for k, v in self.data.items():
            lines.append(f"data.{k}={_fmt_value(v)}")
        if net is not None:
            lines += [f"net.{line}" for line in net.to_text().splitlines()]
        for k, v in self.train.items():
            lines.append(f"train.{k}={_fmt_value(v)}")
        return "\n".join(lines) + "\n"


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _parse_value(raw: str, like):
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if isinstance(like, bool):
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    if isinstance(like, str):
        return raw
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if like and isinstance(like[0], str):
            return tuple(parts)
        return tuple(float(p) for p in parts)
    return float(raw)


def load_config(text: str = "") -> RunConfig:
    """Parse a run configuration; unknown keys are errors."""
    try:
        values = parse_keyvalue(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    spec_defaults = dataclasses.asdict(SceneSpec())
    spec_kw, data, net, tr = {}, dict(DATA_DEFAULTS), {}, dict(TRAIN_DEFAULTS)
    net_fields = {f.name for f in dataclasses.fields(NetworkConfig)}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        try:
            if section == "data" and name in spec_defaults:
                spec_kw[name] = _parse_value(raw, spec_defaults[name])
            elif section == "data" and name in data:
                like = 0.0 if name == "ground_height" else data[name]
                data[name] = _parse_value(raw, like)
            elif section == "net" and name in net_fields:
                net[name] = raw
            elif section == "train" and name in tr:
                tr[name] = _parse_value(raw, tr[name])
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    try:
        spec = SceneSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(spec, net, tr, data)


def _read_config(args) -> RunConfig:
    if args.config is None:
        return load_config("")
    path = Path(args.config)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    return load_config(path.read_text())


def _load_dir(directory, what="data") -> list:
    path = Path(directory)
    if not path.is_dir():
        raise DataError(f"{what} directory not found: {path}")
    files = list_pairs(path)
    if not files:
        raise DataError(f"no .scene files in {path}")
    return [read_pair(f) for f in files]


def _points(args, run: RunConfig) -> int | None:
    if args.points is None:
        return run.data["points"]
    if len(args.points) != 1:
        raise UsageError("this command takes a single --points value")
    return args.points[0]


def _prepare(pairs, run: RunConfig, n: int | None, seed: int) -> list:
    return [preprocess(p, depth_max=run.data["depth_max"], ground_height=run.data["ground_height"],
                       n_samples=n, seed=seed + i) for i, p in enumerate(pairs)]


# -- commands --------------------------------------------------------------------

def cmd_gen(args, out) -> int:
    run = _read_config(args)
    if args.out is None:
        raise UsageError("gen needs --out DIR")
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    count = args.pairs if args.pairs is not None else run.data["pairs"]
    n = _points(args, run)
    for i in range(count):
        seed = args.seed + i
        pair = gen_scene(run.spec, seed, density_mult=args.density_mult)
        if n is not None:
            pair = _prepare([pair], run, n, seed)[0]
        name = f"pair_{i:04d}.scene"
        write_pair(dest / name, pair)
        print(f"{name} seed={seed} n1={pair.n1} n2={pair.n2} sha256={checksum(pair)}", file=out)
    return EXIT_OK


def cmd_train(args, out) -> int:
    run = _read_config(args)
    if args.data is None or args.out is None:
        raise UsageError("train needs --data DIR and --out DIR")
    n = _points(args, run)
    pairs = _prepare(_load_dir(args.data), run, n, args.seed)
    held = _prepare(_load_dir(args.heldout, "held-out"), run, n, args.seed + 10_000) if args.heldout else []
    cfg = run.network(fit_base_scale(pairs))
    cfg = cfg.replace(seed=args.seed)
    if args.ablation:
        cfg = ablation_variant(cfg, args.ablation)
    tr = dict(run.train)
    if args.steps is not None:
        tr["steps"] = args.steps
    eval_every = int(tr.pop("eval_every"))
    state, curve = train_recipe(pairs, cfg, held_out=held, seed=args.seed, eval_every=eval_every, **tr)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    write_checkpoint(dest / "model.ckpt", state.net)
    (dest / "run.cfg").write_text(run.to_text(cfg))
    curve_lines = [" ".join(f"{k}={v}" for k, v in e.items()) for e in curve]
    (dest / "curve.txt").write_text("\n".join(curve_lines) + "\n")
    summary = {"steps": state.step, "params": state.net.num_params, "base_scale": cfg.base_scale,
               "train_epe3d": evaluate(state.net, pairs)}
    if held:
        summary["heldout_epe3d"] = evaluate(state.net, held)
    for k, v in summary.items():
        print(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}", file=out)
    return EXIT_OK


def cmd_eval(args, out) -> int:
    run = _read_config(args)
    if args.data is None:
        raise UsageError("eval needs --data DIR")
    pairs = _load_dir(args.data)
    if args.points is not None:
        pairs = _prepare(pairs, run, _points(args, run), args.seed)
    net = read_checkpoint(args.checkpoint) if args.checkpoint else None
    preds, gts, pc1s = [], [], []
    for p in pairs:
        if net is not None:
            pred = net.predict(p)
        elif p.pred_flow is not None:
            pred = p.pred_flow
        else:
            raise DataError("no --checkpoint given and the scene files carry no pred_flow section")
        if not np.all(np.isfinite(pred)):
            raise NumericalError("prediction contains non-finite values")
        preds.append(pred)
        gts.append(p.gt_flow)
        pc1s.append(p.pc1)
    pc1 = np.concatenate(pc1s)
    camera = CameraModel() if np.all(pc1[:, 2] > 0) else None
    report = compute_metrics(np.concatenate(preds), np.concatenate(gts), pc1=pc1, camera=camera)
    if args.format in ("table", "both"):
        out.write(report.to_table())
    if args.format == "both":
        out.write("\n")
    if args.format in ("kv", "both"):
        out.write(report.to_keyvalue())
    if args.out:
        dest = Path(args.out)
        dest.mkdir(parents=True, exist_ok=True)
        (dest / "report.txt").write_text(report.to_keyvalue())
    return EXIT_OK


def cmd_bench(args, out) -> int:
    run = _read_config(args)
    points = tuple(args.points) if args.points else DEFAULT_POINTS
    if any(n < 2 for n in points):
        raise UsageError("--points values must be >= 2")
    base = run.network(base_scale=1.0) if run.net else None
    if base is not None and args.ablation:
        base = ablation_variant(base, args.ablation)
    elif args.ablation:
        base = ablation_variant(NetworkConfig(), args.ablation)
    report = run_bench(points, repeats=args.repeats, spec=run.spec, cfg=base, seed=args.seed)
    out.write(report.to_table())
    out.write("\n")
    out.write(report.to_keyvalue())
    if args.out:
        dest = Path(args.out)
        dest.mkdir(parents=True, exist_ok=True)
        (dest / "bench.txt").write_text(report.to_keyvalue())
    return EXIT_OK


def cmd_selftest(args, out) -> int:
    results = selftest.run_all(quick=args.quick)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed", file=out)
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _point_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N1,N2,..., got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value run configuration")
    common.add_argument("--seed", type=_seed, default=0, metavar="U64")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="BLAS threads (1 is the reference mode)")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--points", type=_point_list, metavar="N", help="points per frame (bench: comma list)")
    common.add_argument("--density-mult", type=float, default=1.0, metavar="K")
    common.add_argument("--ablation", choices=ABLATIONS + ("no_norm",), metavar="NAME")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="latticeflow", description="Scene flow on permutohedral lattices.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("gen", parents=[common], help="generate synthetic scene pairs")
    p.add_argument("--pairs", type=int, help="number of pairs (seeds SEED, SEED+1, ...)")
    p.set_defaults(func=cmd_gen)
    p = sub.add_parser("train", parents=[common], help="train a network on a directory of pairs")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--heldout", metavar="DIR")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint (or stored predictions)")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--format", choices=("table", "kv", "both"), default="both")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("bench", parents=[common], help="per-stage timings and occupied lattice counts")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("selftest", parents=[common], help="invariant and oracle suites")
    p.add_argument("--quick", action="store_true")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("latticeflow: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args, out)
    except UsageError as exc:
        print(f"latticeflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"latticeflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"latticeflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def _entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    _entry()
