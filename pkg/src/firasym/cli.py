"""Command-line entry point.

Four subcommands: ``asym`` (closed-form limit report), ``mc`` (Monte-Carlo
run), ``table1`` (condition-number table) and ``sweep`` (closed-form ridge
quantities over a pole-parameter grid).  Every command is a pure function
of (config file, overrides, seed): rerunning with the same inputs produces
byte-identical artifacts regardless of the thread count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import warnings

import numpy as np

from . import __version__
from .asymptotics import asymptotic_report, ridge_report, sigma_matrix
from .errors import ConfigError, FirasymError, SingularHessianWarning
from .estimators import KernelSpec, OptimizerOptions
from .montecarlo import (
    ExperimentConfig,
    aggregates_json_dict,
    run_experiment,
    table1,
    write_records_csv,
)
from .signals import (
    FilterSpec,
    NoiseSpec,
    SecondOrderAR,
    derive_stream,
    generate_t1,
    generate_t2,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

_SYSTEM_TAG = 1  # matches the Monte-Carlo system stream


# ------------------------------------------------------------ config plumbing


def _load_config(path: str) -> dict:
    try:
        with open(path) as handle:
            cfg = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg


def _apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` overrides with dotted paths; values parse as JSON
    when possible and fall back to raw strings."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return cfg


def _field(cfg: dict, path: str, kind, required: bool = True, default=None):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"missing field: {path}")
            return default
        node = node[part]
    if kind is float and isinstance(node, int):
        node = float(node)
    if kind is int and isinstance(node, float) and node.is_integer():
        node = int(node)
    if not isinstance(node, kind):
        raise ConfigError(f"field {path}: expected {kind.__name__}")
    return node


def _config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _header(cfg: dict, seed: int) -> dict:
    return {"config_sha256": _config_hash(cfg), "seed": seed, "version": __version__}


def _dump_json(path: str, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def _kernel_from_config(cfg: dict) -> KernelSpec:
    family = _field(cfg, "kernel.family", str)
    omega = _field(cfg, "kernel.omega", list, required=False)
    try:
        return KernelSpec(family, np.array(omega, dtype=float) if omega else None)
    except ValueError as exc:
        raise ConfigError(f"field kernel: {exc}") from None


def _noise_from_config(cfg: dict) -> NoiseSpec:
    sigma2 = _field(cfg, "noise.sigma2", float)
    fourth = _field(cfg, "noise.fourth_moment", float, required=False)
    try:
        return NoiseSpec(sigma2=sigma2, fourth_moment=fourth)
    except ValueError as exc:
        raise ConfigError(f"field noise: {exc}") from None


def _filter_from_config(cfg: dict) -> FilterSpec:
    a = _field(cfg, "filter.a", float)
    cu2 = _field(cfg, "filter.cu2", float)
    sigma_e2 = _field(cfg, "filter.sigma_e2", float, required=False, default=1.0)
    kurt = _field(cfg, "filter.kurtosis_ratio", float, required=False, default=3.0)
    try:
        return FilterSpec(
            kind=SecondOrderAR(a=a, c_u=math.sqrt(cu2)),
            sigma_e2=sigma_e2,
            kurtosis_ratio=kurt,
        )
    except ValueError as exc:
        raise ConfigError(f"field filter: {exc}") from None


def _theta0_from_config(cfg: dict, n_hint, seed: int) -> np.ndarray:
    if "theta0" in cfg:
        theta0 = np.asarray(_field(cfg, "theta0", list), dtype=float)
        if theta0.ndim != 1 or theta0.size < 1:
            raise ConfigError("field theta0: expected a flat number list")
        return theta0
    kind = _field(cfg, "system.type", str)
    n = _field(cfg, "system.n", int, required=False, default=n_hint)
    if n is None:
        raise ConfigError("missing field: system.n")
    rng = derive_stream(seed, _SYSTEM_TAG, 0)
    if kind == "T1":
        return generate_t1(n, rng).theta0
    if kind == "T2":
        return generate_t2(n, rng).theta0
    raise ConfigError("field system.type: expected T1 or T2")


def _optimizer_from_config(cfg: dict) -> OptimizerOptions:
    return OptimizerOptions(
        starts=_field(cfg, "optimizer.starts", int, required=False, default=8),
        max_iters=_field(cfg, "optimizer.max_iters", int, required=False, default=400),
        tol_cost=_field(
            cfg, "optimizer.tol_cost", float, required=False, default=1e-12
        ),
        tol_step=_field(
            cfg, "optimizer.tol_step", float, required=False, default=1e-10
        ),
    )


# ----------------------------------------------------------------- commands


def cmd_asym(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.override)
    seed = args.seed if args.seed is not None else _field(
        cfg, "seed", int, required=False, default=0
    )
    kernel = _kernel_from_config(cfg)
    noise = _noise_from_config(cfg)
    filt = _filter_from_config(cfg)
    n_samples = _field(cfg, "N", int)
    theta0 = _theta0_from_config(cfg, None, seed)
    report = asymptotic_report(kernel, theta0, filt, noise, n_samples)
    payload = {"header": _header(cfg, seed), "report": report.to_json_dict()}
    out_path = os.path.join(args.out, "asym_report.json")
    _dump_json(out_path, payload)
    doc = report.to_json_dict()
    print(f"cond(Sigma) = {doc['cond_sigma']:.6g}")
    print(f"Tr V_b_h    = {doc['trace_v_b_h']:.6g}")
    print(
        "AMSE 1/2/3  = "
        f"{doc['amse'][0]:.6g} / {doc['amse'][1]:.6g} / {doc['amse'][2]:.6g}"
    )
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_mc(args) -> int:
    cfg = _apply_overrides(_load_config(args.config), args.override)
    seed = args.seed if args.seed is not None else _field(
        cfg, "seed", int, required=False, default=0
    )
    system_type = _field(cfg, "system.type", str)
    theta0 = None
    if system_type == "explicit":
        theta0 = np.asarray(_field(cfg, "system.theta0", list), dtype=float)
    filters = _field(cfg, "filters", list)
    try:
        config = ExperimentConfig(
            kernel=_kernel_from_config(cfg),
            system_type=system_type,
            n=_field(cfg, "n", int),
            n_samples=_field(cfg, "N", int),
            filters=[tuple(pair) for pair in filters],
            noise=_noise_from_config(cfg),
            records=_field(cfg, "records", int),
            systems=_field(cfg, "system.count", int, required=False, default=1),
            master_seed=seed,
            theta0=theta0,
            sigma_e2=_field(cfg, "sigma_e2", float, required=False, default=1.0),
            optimizer=_optimizer_from_config(cfg),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    outcome = run_experiment(config, threads=args.threads)
    header = _header(cfg, seed)
    csv_path = os.path.join(args.out, "records.csv")
    json_path = os.path.join(args.out, "aggregates.json")
    write_records_csv(csv_path, outcome.records, config.kernel.p, header)
    _dump_json(json_path, {"header": header, **aggregates_json_dict(outcome)})
    print(f"records   : {len(outcome.records)}")
    print(f"excluded  : {len(outcome.failures)}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK if not outcome.failures else EXIT_NUMERICAL


def cmd_table1(args) -> int:
    rows = table1(args.a, args.n, args.N, args.records, args.seed)
    flag_cfg = {
        "a": args.a,
        "n": args.n,
        "N": args.N,
        "records": args.records,
        "command": "table1",
    }
    header = _header(flag_cfg, args.seed)
    out_path = os.path.join(args.out, "table1.csv")
    with open(out_path, "w") as handle:
        for key, value in header.items():
            handle.write(f"# {key}={value}\n")
        handle.write("a,cond_sigma,mean_cond_phitphi\n")
        for row in rows:
            handle.write(
                f"{row['a']!r},{row['cond_sigma']!r},{row['mean_cond_phitphi']!r}\n"
            )
    print("a              " + "".join(f"{row['a']:>12g}" for row in rows))
    print(
        "cond(Phi'Phi)  "
        + "".join(f"{row['mean_cond_phitphi']:>12.3g}" for row in rows)
    )
    print("cond(Sigma)    " + "".join(f"{row['cond_sigma']:>12.3g}" for row in rows))
    print(f"wrote {out_path}")
    return EXIT_OK


def _first_decrease(values: list[float]) -> int:
    """1-based index of the first strict decrease, or len(values) if none."""
    for i in range(len(values) - 1):
        if values[i + 1] - values[i] <= 0.0:
            return i + 1
    return len(values)


def cmd_sweep(args) -> int:
    rng = derive_stream(args.seed, _SYSTEM_TAG, 0)
    theta0 = generate_t1(args.n, rng).theta0
    noise = NoiseSpec(sigma2=args.sigma2)
    grid = [args.a_max * (i + 1) / args.grid_points for i in range(args.grid_points)]
    flag_cfg = {
        "a_max": args.a_max,
        "grid_points": args.grid_points,
        "n": args.n,
        "N": args.N,
        "sigma2": args.sigma2,
        "command": "sweep",
    }
    header = _header(flag_cfg, args.seed)
    out_path = os.path.join(args.out, "sweep.csv")
    summaries = []
    with open(out_path, "w") as handle:
        for key, value in header.items():
            handle.write(f"# {key}={value}\n")
        handle.write(
            "n_samples,a,cu2,cond_sigma,e_b_ar_sq_norm,trace_v_als,trace_v_b_ar\n"
        )
        for n_samples in args.N:
            cols = {"cond": [], "bias": [], "v_als": [], "v_ar": []}
            for a in grid:
                unit = FilterSpec(kind=SecondOrderAR(a=a, c_u=1.0))
                lam_max = float(np.linalg.eigvalsh(sigma_matrix(unit, args.n))[-1])
                cu2 = 1.0 / lam_max  # scales Sigma to have largest eigenvalue 1
                filt = FilterSpec(kind=SecondOrderAR(a=a, c_u=math.sqrt(cu2)))
                doc = ridge_report(theta0, filt, noise, n_samples).to_json_dict()
                cols["cond"].append(doc["cond_sigma"])
                cols["bias"].append(doc["e_b_ar_sq_norm"])
                cols["v_als"].append(doc["trace_v_als"])
                cols["v_ar"].append(doc["trace_v_b_ar"])
                handle.write(
                    f"{n_samples},{a!r},{cu2!r},{doc['cond_sigma']!r},"
                    f"{doc['e_b_ar_sq_norm']!r},{doc['trace_v_als']!r},"
                    f"{doc['trace_v_b_ar']!r}\n"
                )
            summaries.append((n_samples, cols))
    for n_samples, cols in summaries:
        print(
            f"N={n_samples}: "
            f"cond nondecreasing={cols['cond'] == sorted(cols['cond'])}, "
            f"bias^2 nondecreasing={cols['bias'] == sorted(cols['bias'])}, "
            f"TrV_als nondecreasing={cols['v_als'] == sorted(cols['v_als'])}, "
            f"TrV_ar first decrease at {_first_decrease(cols['v_ar'])}"
            f"/{len(cols['v_ar'])}"
        )
    print(f"wrote {out_path}")
    return EXIT_OK


# --------------------------------------------------------------------- main


def _parse_threads(value: str) -> int:
    if value == "auto":
        return os.cpu_count() or 1
    try:
        threads = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be 'auto' or an integer")
    if threads < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firasym",
        description="Regularized FIR identification: limit reports and Monte-Carlo runs",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config: bool):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config file")
            p.add_argument(
                "--override",
                action="append",
                default=[],
                metavar="K=V",
                help="override a config field (dotted path), repeatable",
            )
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument(
            "--strict",
            action="store_true",
            help="escalate numerical warnings to exit code 3",
        )

    p_asym = sub.add_parser("asym", help="write a closed-form limit report")
    common(p_asym, needs_config=True)
    p_asym.set_defaults(func=cmd_asym)

    p_mc = sub.add_parser("mc", help="run a Monte-Carlo experiment")
    common(p_mc, needs_config=True)
    p_mc.add_argument(
        "--threads", type=_parse_threads, default=1, help="'auto' or a worker count"
    )
    p_mc.set_defaults(func=cmd_mc)

    p_t1 = sub.add_parser("table1", help="condition numbers of Sigma and Phi'Phi")
    common(p_t1, needs_config=False)
    p_t1.add_argument("--a", type=float, nargs="+", default=[0.05, 0.7, 0.95])
    p_t1.add_argument("--n", type=int, default=20)
    p_t1.add_argument("--N", type=int, default=1000)
    p_t1.add_argument("--records", type=int, default=500)
    p_t1.set_defaults(func=cmd_table1)

    p_sw = sub.add_parser("sweep", help="ridge limit quantities over a pole grid")
    common(p_sw, needs_config=False)
    p_sw.add_argument("--grid-points", type=int, default=100)
    p_sw.add_argument("--a-max", type=float, default=0.99)
    p_sw.add_argument("--n", type=int, default=20)
    p_sw.add_argument("--N", type=int, nargs="+", default=[1000, 100000])
    p_sw.add_argument("--sigma2", type=float, default=1.0)
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None:
        args.seed = 0 if args.command in ("table1", "sweep") else None
    os.makedirs(args.out, exist_ok=True)
    try:
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", SingularHessianWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FirasymError, SingularHessianWarning, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
