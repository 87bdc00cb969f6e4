"""Command-line interface: ``ocdrl simulate | learn | threshold | bench``.

Options can come from an INI-style config file (``--config``).  Keys are
read from the section named after the command, then from the shared
``[learner]`` and ``[pip]`` sections; flags given on the command line
override both.  Every command that writes files also writes a manifest
holding the resolved configuration.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .bench import (
    METHODS,
    DgpSpec,
    ExperimentCell,
    computational_instance,
    default_jobs,
    generate_statistical,
    run_experiment,
)
from .core import DataValidationError, Dataset, LinearPolicy, load_dataset, write_dataset
from .learn import INIT_CHOICES, LearnerSpec, learn_policy
from .pip import PipConfig
from .threshold import (
    BASES,
    ThresholdTieError,
    build_suffix_sums,
    mse_table,
    optimal_threshold,
    oracle_threshold_arrays,
)

log = logging.getLogger("ocdrl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags, config values or input files."""


# ------------------------------------------------------------ option table

# name -> (type, default, config sections searched after the command's own)
LEARNER_OPTIONS: dict[str, tuple[Callable, Any]] = {
    "split": (float, 0.5),
    "ridge": (float, 1e-6),
    "lam": (float, 0.0),
    "eps": (float, None),
    "radius": (float, 10.0),
    "init": (str, "auto"),
}
PIP_OPTIONS: dict[str, tuple[Callable, Any]] = {
    "initial_ratio": (float, 0.05),
    "max_ratio": (float, 0.5),
    "min_ratio": (float, 0.01),
    "expand": (float, 0.05),
    "shrink": (float, 0.02),
    "max_iterations": (int, 15),
    "max_stalls": (int, 3),
    "time_limit": (float, None),
    "node_limit": (int, 2000),
    "backend": (str, "builtin"),
}


def _flag(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


class Resolver:
    """CLI flag, then config file, then built-in default."""

    def __init__(self, args: argparse.Namespace, config: configparser.ConfigParser, command: str) -> None:
        self.args = args
        self.config = config
        self.sections = [command, "learner", "pip"]
        self.resolved: dict[str, Any] = {}

    def get(self, name: str, conv: Callable, default: Any) -> Any:
        value = getattr(self.args, name, None)
        if value is None:
            for section in self.sections:
                if self.config.has_option(section, name):
                    raw = self.config.get(section, name).strip()
                    try:
                        value = None if raw.lower() in ("", "none") else conv(raw)
                    except ValueError:
                        raise UsageError(f"bad value {raw!r} for '{name}' in [{section}]") from None
                    break
            else:
                value = default
        self.resolved[name] = value
        return value


def _add_learner_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("learner")
    g.add_argument("--split", type=float, help="fraction of rows used to fit the reward model")
    g.add_argument("--ridge", type=float, help="ridge penalty of the reward model")
    g.add_argument("--lam", type=float, help="l1 weight on the policy coefficients")
    g.add_argument("--eps", type=float, help="step-function shift (default: automatic)")
    g.add_argument("--radius", type=float, help="coefficient box radius")
    g.add_argument("--init", choices=INIT_CHOICES, help="initial point for PIP")
    g = p.add_argument_group("pip")
    for name, (conv, _) in PIP_OPTIONS.items():
        flag = "--" + name.replace("_", "-")
        if name == "backend":
            g.add_argument(flag, dest=name, choices=("builtin", "highs"))
        else:
            g.add_argument(flag, dest=name, type=conv)


def _learner_spec(r: Resolver, estimator: str, seed: int) -> LearnerSpec:
    vals = {k: r.get(k, conv, d) for k, (conv, d) in LEARNER_OPTIONS.items()}
    pip_vals = {k: r.get(k, conv, d) for k, (conv, d) in PIP_OPTIONS.items()}
    try:
        pip = PipConfig(**pip_vals)
        return LearnerSpec(
            estimator=estimator, split_fraction=vals["split"], ridge=vals["ridge"], pip=pip,
            lam=vals["lam"], eps=vals["eps"], radius=vals["radius"], seed=seed, init=vals["init"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dgp_spec(r: Resolver, seed: int) -> DgpSpec:
    kind = r.get("dgp", str, "statistical")
    if kind not in ("statistical", "computational"):
        raise UsageError(f"unknown dgp {kind!r}")
    n = r.get("n", int, 400)
    support = r.get("support", int, 100)
    noise_sd = r.get("noise_sd", float, 0.1)
    if n < 1 or support < 1:
        raise UsageError("sizes must be positive")
    if noise_sd < 0:
        raise UsageError("noise sd must be nonnegative")
    return DgpSpec(kind=kind, n=n, support=support, seed=seed, noise_sd=noise_sd)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _manifest(command: str, resolved: dict, outputs: list[str]) -> dict:
    return {"command": command, "version": __version__, "config": resolved, "outputs": outputs}


def _load(path: str | None, r: Resolver) -> Dataset:
    if not path:
        raise UsageError("no dataset given (--data)")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    bound = r.get("reward_bound", float, None)
    eta = r.get("eta", float, None)
    sidecar = p.with_suffix(".manifest.json")
    if (bound is None or eta is None) and sidecar.is_file():
        # bounds recorded by `ocdrl simulate`
        meta = json.loads(sidecar.read_text()).get("dataset", {})
        bound = meta.get("reward_bound") if bound is None else bound
        eta = meta.get("overlap_floor") if eta is None else eta
        r.resolved.update(reward_bound=bound, eta=eta)
    bounds = (bound, eta) if bound is not None and eta is not None else None
    try:
        return load_dataset(p, bounds=bounds)
    except DataValidationError as exc:
        raise UsageError(f"{p}: {exc}") from None


# ---------------------------------------------------------------- commands


def cmd_simulate(args: argparse.Namespace, config: configparser.ConfigParser) -> int:
    r = Resolver(args, config, "simulate")
    seed = r.get("seed", int, 0)
    spec = _dgp_spec(r, seed)
    out = Path(r.get("out", str, "data.csv"))
    if spec.kind == "statistical":
        ds, _ = generate_statistical(spec.n, seed, spec)
    else:
        ds, _ = computational_instance(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out)
    manifest = _manifest("simulate", r.resolved, [out.name])
    manifest["dataset"] = {
        "rows": ds.n, "covariates": ds.dim, "treatments": ds.num_treatments,
        "reward_bound": ds.reward_bound, "overlap_floor": ds.overlap_floor,
    }
    _write_json(out.with_suffix(".manifest.json"), manifest)
    print(f"wrote {ds.n} rows to {out}")
    return EXIT_OK


def cmd_learn(args: argparse.Namespace, config: configparser.ConfigParser) -> int:
    r = Resolver(args, config, "learn")
    method = r.get("method", str, "ocdrl")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {tuple(METHODS)}")
    seed = r.get("seed", int, 0)
    timing = bool(r.get("timing", _flag, False))
    spec = _learner_spec(r, METHODS[method], seed)
    ds = _load(r.get("data", str, None), r)
    if ds.propensity_model is None:
        raise UsageError("learning needs the full propensity columns e1..eJ in the dataset")
    out = Path(r.get("out", str, "."))
    out.mkdir(parents=True, exist_ok=True)
    result = learn_policy(ds, spec)
    payload = result.to_dict()
    payload["trace"] = "trace.jsonl"
    _write_json(out / "policy.json", payload)
    (out / "trace.jsonl").write_text(result.trace.to_jsonl(timing))
    _write_json(out / "manifest.json",
                _manifest("learn", r.resolved, ["policy.json", "trace.jsonl"]))
    print(f"{method}: objective {result.objective:.6g}, estimated value {result.value:.6g}")
    return EXIT_OK


def _read_policy(path: str | None) -> LinearPolicy:
    if not path:
        raise UsageError("no policy given (--policy)")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"policy file not found: {p}")
    try:
        payload = json.loads(p.read_text())
        if "policy" in payload:
            payload = payload["policy"]
        return LinearPolicy.from_dict(payload)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{p}: not a policy file ({exc})") from None


def cmd_threshold(args: argparse.Namespace, config: configparser.ConfigParser) -> int:
    r = Resolver(args, config, "threshold")
    ds = _load(r.get("data", str, None), r)
    policy = _read_policy(r.get("policy", str, None))
    basis = r.get("basis", str, "logged")
    oracle = bool(r.get("oracle", _flag, False))
    if basis not in BASES:
        raise UsageError(f"unknown basis {basis!r}")
    if policy.dim != ds.dim:
        raise UsageError(f"policy has {policy.dim} covariates, dataset has {ds.dim}")
    if basis == "counterfactual" and ds.propensity_model is None:
        raise UsageError("the counterfactual basis needs the propensity columns e1..eJ")
    view, sums = build_suffix_sums(ds, policy, basis)
    tau = optimal_threshold(view, sums)
    ips = view.values[1:][np.argsort(view.order)]
    matched = policy.assign(ds.covariates) == ds.treatments
    grid, bias_sq, variance = mse_table(ips, matched)
    objective = bias_sq + 2.0 * variance
    report = {
        "tau": tau,
        "m_star": sums.m_star,
        "grid": grid.tolist(),
        "objective": objective.tolist(),
        "basis": basis,
    }
    print(f"tau_hat = {tau!r}")
    print(f"m_star = {sums.m_star}")
    print("grid objective")
    for t, v in zip(grid.tolist(), objective.tolist()):
        print(f"{t!r} {v!r}")
    status = EXIT_OK
    if oracle:
        brute = oracle_threshold_arrays(ips, matched)
        report["oracle_tau"] = brute
        print(f"oracle tau = {brute!r}")
        if brute != tau:
            print("closed form and brute force disagree", file=sys.stderr)
            status = EXIT_RUNTIME
    out = r.get("out", str, None)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "threshold.json", report)
        _write_json(out / "manifest.json", _manifest("threshold", r.resolved, ["threshold.json"]))
    return status


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def cmd_bench(args: argparse.Namespace, config: configparser.ConfigParser) -> int:
    r = Resolver(args, config, "bench")
    methods = [m.strip() for m in r.get("methods", str, ",".join(METHODS)).split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; expected one of {tuple(METHODS)}")
    sizes = _int_list(r.get("n", str, "400"))
    seeds = r.get("seeds", int, 1)
    offset = r.get("seed_offset", int, 0)
    if not methods or not sizes or seeds < 1 or any(n < 2 for n in sizes):
        raise UsageError("the grid needs at least one method, one size >= 2 and one seed")
    jobs = r.get("jobs", int, default_jobs())
    timing = bool(r.get("timing", _flag, False))
    test_size = r.get("test_size", int, 10_000)
    noise_sd = r.get("noise_sd", float, 0.1)
    if noise_sd < 0:
        raise UsageError("noise sd must be nonnegative")
    # the benchmark runs the statistical design; N comes from each grid cell
    dgp = DgpSpec(noise_sd=noise_sd)
    spec = _learner_spec(r, "ocdr", offset)
    grid = [ExperimentCell(m, n, tuple(range(offset, offset + seeds))) for m in methods for n in sizes]
    out = Path(r.get("out", str, "bench_out"))
    result = run_experiment(grid, out, spec, dgp, test_size=test_size, jobs=max(1, jobs), timing=timing)
    manifest = json.loads((out / "manifest.json").read_text())
    # jobs only changes scheduling, so it stays out of the manifest
    manifest["config"] = {k: v for k, v in r.resolved.items() if k != "jobs"}
    _write_json(out / "manifest.json", manifest)
    for entry in result["ordering"]:
        gaps = ", ".join(f"{m} {g:.4g}" for m, g in sorted(entry["gap_mean"].items()))
        print(f"N={entry['N']}: mean gap {gaps}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocdrl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI-style config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--dgp", choices=("statistical", "computational"))
    p.add_argument("--n", type=int)
    p.add_argument("--support", type=int, help="support size of the computational design")
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV path (default data.csv)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("learn", help="learn a linear policy from logged data")
    p.add_argument("--data")
    p.add_argument("--method", choices=tuple(METHODS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default .)")
    p.add_argument("--reward-bound", dest="reward_bound", type=float)
    p.add_argument("--eta", type=float, help="overlap floor")
    p.add_argument("--timing", action="store_true", default=None, help="record wall times in the trace")
    _add_learner_flags(p)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("threshold", help="closed-form clipping threshold of a policy")
    p.add_argument("--data")
    p.add_argument("--policy", help="policy JSON (a learn output or a bare policy)")
    p.add_argument("--basis", choices=BASES)
    p.add_argument("--oracle", action="store_true", default=None, help="also run the brute-force check")
    p.add_argument("--reward-bound", dest="reward_bound", type=float)
    p.add_argument("--eta", type=float, help="overlap floor")
    p.add_argument("--out", help="directory for threshold.json")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("bench", help="run a grid of synthetic experiments")
    p.add_argument("--methods", help="comma-separated subset of ocdrl,drl,ipwl")
    p.add_argument("--n", help="comma-separated sample sizes")
    p.add_argument("--seeds", type=int, help="number of seeds per cell")
    p.add_argument("--seed-offset", dest="seed_offset", type=int)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--jobs", type=int, help="worker processes (default $OCDR_JOBS or 1)")
    p.add_argument("--timing", action="store_true", default=None, help="record wall times")
    p.add_argument("--out", help="output directory (default bench_out)")
    _add_learner_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def _read_config(path: str | None) -> configparser.ConfigParser:
    config = configparser.ConfigParser()
    if path is None:
        return config
    if not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        config.read(path)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    return config


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _read_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        print(f"ocdrl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ThresholdTieError, RuntimeError, ArithmeticError, OSError, np.linalg.LinAlgError) as exc:
        print(f"ocdrl: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
