"""Command-line entry point: ``secemb dpf-bench | simulate | ablation``.

Configs are JSON. Every field has a default, unknown keys are rejected, and
command-line flags override file values::

    {
      "dataset": {"path": "u.data", "name": "ml-100k", "train_fraction": 0.8},
      "variant": "final",
      "hyper": {"d": 64, "lr": 0.025, "reg": 0.01, "rounds": 2000,
                "clients_per_round": 100, "m_prime": 200, "alpha": 2.0,
                "local_epochs": 1, "init_std": 0.01, "aggregation": "mean",
                "center": true, "clip_predictions": true, "eval_every": 50,
                "seed": 0},
      "ring": {"b": 32, "f": 16},
      "lambda": 128,
      "dp": {"enabled": false, "epsilon": 1.0, "delta": 1e-5, "delta2": 1.0},
      "dropout": 0.0,
      "warm_start_rounds": 0,
      "crypto_seed": "derived",
      "cache_paths": true,
      "ablation_clients": 5,
      "out": "out"
    }

``crypto_seed`` is ``"derived"`` (seed + 1, reproducible), ``"os"`` (fresh
entropy), or an integer. ``SECEMB_THREADS`` caps internal parallelism.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import dpf, prg
from .dp import DpConfig
from .ring import RingParams
from . import simrec

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "main", "cmd_dpf_bench", "cmd_simulate", "cmd_ablation"]

log = logging.getLogger("secemb")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str = ""
    name: str | None = "ml-100k"
    train_fraction: float = 0.8


@dataclass
class DpSection:
    enabled: bool = False
    epsilon: float = 1.0
    delta: float = 1e-5
    delta2: float = 1.0


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    variant: str = "final"
    hyper: simrec.MfHyper = field(default_factory=simrec.MfHyper)
    ring: RingParams = field(default_factory=RingParams)
    security_bits: int = 128
    dp: DpSection = field(default_factory=DpSection)
    dropout: float = 0.0
    warm_start_rounds: int = 0
    crypto_seed: Any = "derived"
    cache_paths: bool = True
    ablation_clients: int = 5
    out: str = "out"

    def validate(self) -> None:
        if self.variant not in simrec.PIPELINES:
            raise ConfigError(f"variant must be one of {simrec.PIPELINES}, got {self.variant!r}")
        if self.security_bits != prg.LAMBDA:
            raise ConfigError(f"only lambda = {prg.LAMBDA} is implemented")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 <= self.warm_start_rounds <= self.hyper.rounds:
            raise ConfigError("warm_start_rounds must lie in [0, hyper.rounds]")
        if not (self.crypto_seed in ("derived", "os") or isinstance(self.crypto_seed, int)):
            raise ConfigError("crypto_seed must be 'derived', 'os' or an integer")
        if self.ablation_clients < 1:
            raise ConfigError("ablation_clients must be >= 1")
        if self.dp.enabled:
            try:
                self.dp_config()
            except ValueError as exc:
                raise ConfigError(f"dp: {exc}") from None

    def dp_config(self) -> DpConfig | None:
        if not self.dp.enabled:
            return None
        return DpConfig(self.dp.epsilon, self.dp.delta, self.dp.delta2)

    def resolved_crypto_seed(self) -> int | None:
        if self.crypto_seed == "os":
            return None
        if self.crypto_seed == "derived":
            return self.hyper.seed + 1
        return int(self.crypto_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("security_bits")
        return d


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    if "lambda" in raw:
        raw["security_bits"] = raw.pop("lambda")
    sub = {"dataset": DatasetConfig, "hyper": simrec.MfHyper, "ring": RingParams, "dp": DpSection}
    for key, cls in sub.items():
        if key in raw:
            raw[key] = _build(cls, raw[key], key)
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return config_from_dict(raw)


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.hyper.seed = args.seed
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    if getattr(args, "out", None) is not None:
        cfg.out = args.out
    if getattr(args, "dp", False):
        cfg.dp.enabled = True
    if getattr(args, "dropout", None) is not None:
        cfg.dropout = args.dropout
    if getattr(args, "data", None) is not None:
        cfg.dataset.path = args.data
    if getattr(args, "rounds", None) is not None:
        cfg.hyper.rounds = args.rounds
        cfg.warm_start_rounds = min(cfg.warm_start_rounds, args.rounds)
    if getattr(args, "warm_start", None) is not None:
        cfg.warm_start_rounds = args.warm_start
    cfg.validate()
    return cfg


def make_world(cfg: ExperimentConfig) -> simrec.World:
    if not cfg.dataset.path:
        raise ConfigError("dataset.path is not set (use the config file or --data)")
    ds = simrec.load_movielens(cfg.dataset.path, cfg.dataset.name)
    split_rng = np.random.default_rng(np.random.SeedSequence(cfg.hyper.seed).spawn(5)[4])
    ds = simrec.split_train_test(split_rng, ds, cfg.dataset.train_fraction)
    return simrec.build_world(
        ds, cfg.hyper, cfg.variant, cfg.ring, cfg.dp_config(), cfg.dropout,
        cfg.resolved_crypto_seed(), cfg.cache_paths,
    )


# -- commands ---------------------------------------------------------------------------


def cmd_dpf_bench(n: int = 11, keys: int = 200, sweep_max: int = 8, length: int = 65, seed: int = 0,
                  ring: RingParams | None = None) -> dict:
    """Correctness sweep for every domain depth up to ``sweep_max`` plus a throughput run."""
    ring = ring or RingParams()
    if not 1 <= n <= dpf.MAX_FULL_DOMAIN_BITS or not 1 <= sweep_max <= 16:
        raise ConfigError("n must lie in [1, 32] and sweep_max in [1, 16]")
    rng = np.random.default_rng(seed)
    failures = 0
    for depth in range(1, sweep_max + 1):
        alphas = np.arange(1 << depth) if depth <= 6 else rng.integers(0, 1 << depth, 64)
        betas = ring.random(rng, (alphas.size, 3))
        k0, k1, sec = dpf.path_gen_batch(rng, depth, alphas)
        cw = dpf.convert_gen_batch(sec, betas, ring)
        t0, s0 = dpf.eval_full_domain_batch(k0)
        t1, s1 = dpf.eval_full_domain_batch(k1)
        tot = ring.add(dpf.convert_eval_batch(0, t0, s0, cw[:, None, :], ring),
                       dpf.convert_eval_batch(1, t1, s1, cw[:, None, :], ring))
        expect = np.zeros_like(tot)
        expect[np.arange(alphas.size), alphas] = betas
        failures += int(np.any(tot != expect, axis=(1, 2)).sum())
    alphas = rng.integers(0, 1 << n, keys)
    t_start = time.perf_counter()
    k0, _, sec = dpf.path_gen_batch(rng, n, alphas)
    gen_s = time.perf_counter() - t_start
    with prg.counting() as counter:
        t_start = time.perf_counter()
        dpf.eval_full_domain_batch(k0)
        eval_s = time.perf_counter() - t_start
    return {
        "sweep_max_n": sweep_max,
        "sweep_failures": failures,
        "n": n,
        "keys": keys,
        "keygen_keys_per_s": keys / gen_s if gen_s > 0 else float("inf"),
        "full_domain_keys_per_s": keys / eval_s if eval_s > 0 else float("inf"),
        "expansions_per_key": counter.expansions / keys,
        "expansion_bound": 2 ** (n + 1),
        "key_bytes": {"L=1": dpf.dpf_key_size(n, 1, ring), f"L={length}": dpf.dpf_key_size(n, length, ring)},
        "key_bits_formula": {"L=1": dpf.key_bits_formula(n, 1, ring), f"L={length}": dpf.key_bits_formula(n, length, ring)},
    }


def cmd_simulate(cfg: ExperimentConfig, progress: bool = False) -> tuple[simrec.Report, Path, Path]:
    world = make_world(cfg)
    report = simrec.run_experiment(world, cfg.hyper.rounds, cfg.warm_start_rounds, progress)
    report.summary["config"]["experiment"] = cfg.to_dict()
    csv_path, json_path = report.write(cfg.out)
    return report, csv_path, json_path


def cmd_ablation(cfg: ExperimentConfig) -> dict:
    world = make_world(cfg)
    if cfg.warm_start_rounds:
        world.variant = "plaintext"
        for _ in range(cfg.warm_start_rounds):
            simrec.run_round(world)
    return simrec.ablation(world, cfg.ablation_clients)


# -- argument parsing -------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="secemb", description="Two-server private embedding retrieval and aggregation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("dpf-bench", help="DPF correctness sweep, key sizes and throughput")
    b.add_argument("--n", type=int, default=11, help="domain bits for the throughput run")
    b.add_argument("--keys", type=int, default=200)
    b.add_argument("--sweep-max", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="directory for bench.json")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--data", help="ratings file; overrides dataset.path")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=simrec.PIPELINES)
        p.add_argument("--out")
        p.add_argument("--dp", action="store_true", help="enable clipping and server noise")
        p.add_argument("--dropout", type=float)
        p.add_argument("--rounds", type=int)
        p.add_argument("--warm-start", type=int, dest="warm_start")

    common(sub.add_parser("simulate", help="run federated training and write a report"))
    common(sub.add_parser("ablation", help="per-user upload and generation time for each variant"))
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "dpf-bench":
            res = cmd_dpf_bench(args.n, args.keys, args.sweep_max, seed=args.seed)
            print(json.dumps(res, indent=2))
            if args.out:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "bench.json").write_text(json.dumps(res, indent=2) + "\n")
            return 0 if res["sweep_failures"] == 0 else 1
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "simulate":
            report, csv_path, json_path = cmd_simulate(cfg, args.verbose)
            print(f"final rmse {report.summary['final_rmse']:.4f}")
            print(f"wrote {csv_path} and {json_path}")
            return 0
        res = cmd_ablation(cfg)
        print(f"{'variant':<8} {'upload MB/user':>15} {'gen s/user':>12}")
        for v, r in res.items():
            print(f"{v:<8} {r['up_mb_per_user']:>15.4f} {r['gen_seconds_per_user']:>12.4f}")
        if cfg.out:
            Path(cfg.out).mkdir(parents=True, exist_ok=True)
            (Path(cfg.out) / "ablation.json").write_text(json.dumps(res, indent=2) + "\n")
        return 0
    except (FileNotFoundError, ConfigError, simrec.DataError) as exc:
        print(f"secemb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
