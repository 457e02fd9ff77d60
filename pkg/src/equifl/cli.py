"""Command-line front door: ``equifl {partition,train,evaluate,sweep}``.

Exit status: 0 on success, 1 for configuration/validation errors, 2 for
runtime or numeric failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint
from .config import ExperimentConfig, load_config
from .data import ClientDataset, clients_from_manifest, partition_manifest
from .errors import ConfigError, EquiFLError
from .experiment import (
    SWEEP_FIELDS,
    SWEEP_PARAMETERS,
    load_records,
    partition_clients,
    provenance,
    run_seed,
    sweep,
    sweep_config,
)
from .fedsim import deployed_models, selective_init
from .report import build_report, report_csv, report_json, table_csv

log = logging.getLogger("equifl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _dump(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def manifest_path(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.out_dir / f"partition_seed_{seed}.json"


def seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.out_dir / f"seed_{seed}"


def run_label(cfg: ExperimentConfig) -> str:
    if cfg.fed.mode == "fedavg":
        return "fedavg-baseline" if cfg.fed.mu == 0 else "fedavg"
    return "equifl"


def _write_manifest(cfg: ExperimentConfig, seed: int, clients: list[ClientDataset]) -> Path:
    doc = partition_manifest(clients)
    doc["provenance"] = provenance(cfg, seed)
    doc["group_proportions"] = {
        str(c.client_id): c.group_proportions(cfg.schema.num_groups) for c in clients
    }
    path = manifest_path(cfg, seed)
    _dump(path, _json(doc))
    return path


def _clients_for(cfg: ExperimentConfig, seed: int, records) -> list[ClientDataset]:
    path = manifest_path(cfg, seed)
    if path.is_file():
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("provenance", {}).get("config", {}).get("partition") == cfg.to_dict()["partition"]:
            log.info("using partition manifest %s", path)
            return clients_from_manifest(records, doc)
        log.info("manifest %s was made with a different partition config; repartitioning", path)
    clients = partition_clients(cfg, records, seed)
    _write_manifest(cfg, seed, clients)
    return clients


def cmd_partition(cfg: ExperimentConfig) -> int:
    records, _, dropped = load_records(cfg)
    print(f"{cfg.dataset_path}: {len(records)} records ({dropped} dropped)")
    values = cfg.schema.sensitive_values
    for seed in cfg.seeds:
        clients = partition_clients(cfg, records, seed)
        path = _write_manifest(cfg, seed, clients)
        print(f"seed {seed}: {len(clients)} clients -> {path}")
        print("  client      n  " + "  ".join(f"{v:>8}" for v in values))
        for c in clients:
            props = c.group_proportions(len(values))
            total = len(c.train) + len(c.validation) + len(c.test)
            print(f"  {c.client_id:>6} {total:>6}  " + "  ".join(f"{p:8.3f}" for p in props))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)[0]
    label = run_label(cfg)
    for seed in cfg.seeds:
        clients = _clients_for(cfg, seed, records)

        def progress(state, _seed=seed):
            log.info("seed %d round %d/%d", _seed, state.round_index, cfg.fed.num_rounds)

        result, datasets = run_seed(cfg, seed, records, clients, progress=progress)
        prov = provenance(cfg, seed, label=label)
        out = seed_dir(cfg, seed)
        _dump(out / "report.json", report_json(result.history, prov))
        _dump(out / "clients.csv", report_csv(result.history, prov))
        checkpoint.save_params(out / "checkpoints" / "global", result.global_params, prov)
        for c in result.clients:
            checkpoint.save_params(out / "checkpoints" / f"client_{c.client_id}", c.params, prov)
        final = result.history[-1]
        print(
            f"[{label}] seed {seed}: local acc {final.local['accuracy']:.4f} "
            f"dDP {final.local['delta_dp']:.4f} dEO {final.local['delta_eo']:.4f} | "
            f"global acc {final.global_.accuracy:.4f} dDP {final.global_.delta_dp:.4f} -> {out}"
        )
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    records = load_records(cfg)[0]
    for seed in cfg.seeds:
        out = seed_dir(cfg, seed)
        path = manifest_path(cfg, seed)
        if not path.is_file() or not (out / "checkpoints" / "global.json").is_file():
            raise ConfigError(f"no trained run for seed {seed} under {cfg.out_dir}; run `train` first")
        clients = clients_from_manifest(records, json.loads(path.read_text(encoding="utf-8")))
        global_params, _ = checkpoint.load_params(out / "checkpoints" / "global")
        local = [checkpoint.load_params(out / "checkpoints" / f"client_{c.client_id}")[0] for c in clients]
        rep = build_report(
            cfg.fed.num_rounds, cfg.fed.mode, cfg.fed.mu, clients,
            deployed_models(local, global_params, cfg.fed.mode), global_params,
            [selective_init(p, global_params, cfg.fed.mode) for p in local],
        )
        prov = provenance(cfg, seed, label=run_label(cfg), source=str(out / "checkpoints"))
        _dump(out / "evaluate.json", report_json([rep], prov))
        print(f"seed {seed}: local acc {rep.local['accuracy']:.4f} dDP {rep.local['delta_dp']:.4f} | "
              f"global acc {rep.global_.accuracy:.4f} dDP {rep.global_.delta_dp:.4f}")
    return EXIT_OK


def _parse_values(parameter: str, raw: str) -> list:
    cast = float if parameter == "mu" else int
    try:
        return [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value list {raw!r} for {parameter}") from None


def cmd_sweep(cfg: ExperimentConfig, parameter: str, raw_values: str) -> int:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMETERS}")
    values = _parse_values(parameter, raw_values)
    for v in values:
        sweep_config(cfg, parameter, v)
    total = len(values) * len(cfg.seeds)
    done = 0

    def on_run(value, seed, result):
        nonlocal done
        done += 1
        f = result.history[-1]
        print(f"[{done}/{total}] {parameter}={value} seed {seed}: acc {f.local['accuracy']:.4f} "
              f"dDP {f.local['delta_dp']:.4f}", flush=True)

    rows = sweep(parameter, values, cfg, on_run=on_run)
    prov = provenance(cfg, parameter=parameter, values=values)
    _dump(cfg.out_dir / f"sweep_{parameter}.csv", table_csv(rows, SWEEP_FIELDS, prov))
    _dump(cfg.out_dir / f"sweep_{parameter}.json", _json({"provenance": prov, "rows": rows}))
    print(f"wrote {cfg.out_dir / f'sweep_{parameter}.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="TOML config or a JSON output to replay")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out-dir", type=Path)
    common.add_argument("--mode", choices=("equifl", "fedavg"))
    common.add_argument("--mu", type=float)
    common.add_argument("--clients", type=int, help="number of clients (alphas are tiled)")
    common.add_argument("--rounds", type=int)
    common.add_argument("--evaluate-every", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="equifl", description="Fairness-aware federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("partition", parents=[common], help="write per-seed client partition manifests")
    sub.add_parser("train", parents=[common], help="train and write reports + checkpoints")
    sub.add_parser("evaluate", parents=[common], help="re-evaluate saved checkpoints")
    sw = sub.add_parser("sweep", parents=[common], help="sweep mu or num_clients")
    sw.add_argument("parameter", help=f"one of {', '.join(SWEEP_PARAMETERS)}")
    sw.add_argument("values", help="comma-separated values, e.g. 0,0.1,1,10")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "sweep" and args.parameter not in SWEEP_PARAMETERS:
            raise ConfigError(f"cannot sweep {args.parameter!r}; choose from {SWEEP_PARAMETERS}")
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, out_dir=args.out_dir, mode=args.mode, mu=args.mu,
            clients=args.clients, rounds=args.rounds, evaluate_every=args.evaluate_every,
        )
        cfg.validate_paths()
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        return cmd_sweep(cfg, args.parameter, args.values)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EquiFLError, OSError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
