"""Command-line front end.

    tedsim train  --world-size 4 --tensor-parallel 2 --experts 2 --ckpt --cac
    tedsim verify --config run.json
    tedsim plan   --memory 16e9 --gpus 32 64 128 256 512
    tedsim ledger --world-size 4 --tensor-parallel 2 --experts 2 --format csv

Exit codes: 0 success, 1 invariant failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import warnings
from dataclasses import asdict, dataclass, fields

from tedsim.cost import PLAN_COLUMNS, planner_table, predict_comm_volume
from tedsim.fabric import RECORD_FIELDS, InvalidConfigError
from tedsim.moe import Flags, MoeModelConfig, make_batch, serial_reference_step
from tedsim.topology import derive_config
from tedsim.train import max_abs_diff_vs_serial, serial_train, simulate
from tedsim.zero import DEFAULT_TILE_SIZE, TileConfig

REPORT_VERSION = "tedsim-report/1"

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("tedsim")


@dataclass
class RunConfig:
    world_size: int = 4
    tensor_parallel: int = 2
    experts: int = 2
    layers: int = 1
    hidden: int = 8
    tokens_per_shard: int = 8
    seed: int | None = None
    steps: int = 1
    dtd: bool = False
    cac: bool = False
    ckpt: bool = False
    tiling: bool = True
    tile_size: int = DEFAULT_TILE_SIZE
    mode: str = "train"
    corrupt_drop: bool = False

    def validate(self):
        if self.seed is None:
            raise InvalidConfigError("a seed is required (--seed or \"seed\" in the config)")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        cfg = derive_config(self.world_size, self.tensor_parallel, self.experts)
        model = MoeModelConfig(self.layers, self.hidden, self.experts, self.tokens_per_shard, self.seed)
        flags = Flags(self.dtd, self.cac, self.ckpt, self.corrupt_drop)
        if flags.dtd and model.tokens % cfg.tensor:
            raise InvalidConfigError(f"dtd needs tokens_per_shard divisible by tensor_parallel ({cfg.tensor})")
        if model.ffn % cfg.tensor:
            raise InvalidConfigError(f"4*hidden must be divisible by tensor_parallel ({cfg.tensor})")
        return cfg, model, flags

    @property
    def tile(self) -> TileConfig | None:
        return TileConfig(self.tile_size) if self.tiling else None

    def resolved(self) -> dict:
        d = asdict(self)
        d.pop("corrupt_drop")
        d["flags"] = {k: d.pop(k) for k in _FLAG_FIELDS}
        return d


_FLAG_FIELDS = ("dtd", "cac", "ckpt", "tiling", "tile_size")


_OVERRIDES = {
    "world_size": "world_size",
    "tensor_parallel": "tensor_parallel",
    "experts": "experts",
    "layers": "layers",
    "hidden": "hidden",
    "tokens": "tokens_per_shard",
    "seed": "seed",
    "steps": "steps",
    "tile_size": "tile_size",
}


def load_run_config(args: argparse.Namespace, mode: str) -> RunConfig:
    doc: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = json.load(fh)
        nested = doc.pop("flags", None) or {}
        doc.update(nested)
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise InvalidConfigError(f"unknown config fields: {sorted(unknown)}")
    rc = RunConfig(**doc)
    for arg, attr in _OVERRIDES.items():
        val = getattr(args, arg, None)
        if val is not None:
            setattr(rc, attr, val)
    for flag in ("dtd", "cac", "ckpt"):
        if getattr(args, flag, False):
            setattr(rc, flag, True)
    if getattr(args, "no_tiling", False):
        rc.tiling = False
    rc.corrupt_drop = getattr(args, "inject_drop_fault", False)
    rc.mode = mode
    return rc


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _records_csv(records, columns) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(records)
    return buf.getvalue()


def cli_train(rc: RunConfig) -> dict:
    cfg, model, flags = rc.validate()
    sim = simulate(model, cfg, flags, steps=rc.steps, tile=rc.tile)
    predicted = predict_comm_volume(model, cfg, flags, rc.steps)
    serial_losses, _ = serial_train(model, cfg.data_nonexp, rc.steps)
    first = sim if rc.steps == 1 else simulate(model, cfg, flags, steps=1, tile=rc.tile)
    serial = serial_reference_step(model, make_batch(model, cfg.data_nonexp, 0))
    return {
        "version": REPORT_VERSION,
        "config": rc.resolved(),
        "topology": asdict(cfg),
        "losses": sim.losses,
        "ledger": sim.ledger.records(),
        "ledger_matches_prediction": sim.ledger.records() == predicted,
        "memory": [m.to_dict() for m in sim.memory],
        "equivalence": {
            "loss_max_abs_diff_vs_serial": max(abs(a - b) for a, b in zip(sim.losses, serial_losses)),
            "first_step_grad_max_abs_diff_vs_serial": max_abs_diff_vs_serial(first, serial.grads),
        },
    }


def cli_verify(rc: RunConfig, sweep: bool = True):
    from tedsim.verify import builtin_sweep, check_config

    cfg, model, flags = rc.validate()
    results = check_config(model, cfg, flags)
    if sweep:
        results += builtin_sweep(seed=rc.seed)
    return results


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags below override it")
    p.add_argument("--world-size", type=int)
    p.add_argument("--tensor-parallel", type=int)
    p.add_argument("--experts", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--tokens", type=int, help="tokens per nonexp-data shard")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--dtd", action="store_true", help="duplicate token dropping")
    p.add_argument("--cac", action="store_true", help="communication-aware checkpointing (needs --ckpt)")
    p.add_argument("--ckpt", action="store_true", help="activation checkpointing")
    p.add_argument("--tile-size", type=int)
    p.add_argument("--no-tiling", action="store_true")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--inject-drop-fault", action="store_true", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tedsim", description="Deterministic TED MoE training simulator")
    sub = parser.add_subparsers(dest="mode", required=True)
    _add_run_options(sub.add_parser("train", help="simulate training and emit a JSON report"))
    v = sub.add_parser("verify", help="run the invariant suite")
    _add_run_options(v)
    v.add_argument("--no-sweep", action="store_true", help="skip the built-in sweep of small configs")
    led = sub.add_parser("ledger", help="emit the communication ledger of a simulated run")
    _add_run_options(led)
    led.add_argument("--predicted", action="store_true", help="emit the closed-form prediction instead")
    p = sub.add_parser("plan", help="largest supported MoE per GPU count, TED vs G_tensor=1")
    p.add_argument("--memory", type=float, default=16e9, help="bytes per GPU")
    p.add_argument("--gpus", type=int, nargs="+", default=[32, 64, 128, 256, 512])
    p.add_argument("--tensor-max", type=int, default=6)
    p.add_argument("--experts-max", type=int, default=128)
    p.add_argument("--experts-min", type=int, default=4)
    p.add_argument("--what-if", action="store_true", help="drop divisibility rules (G_tensor | G, E | G/G_tensor)")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TEDSIM_LOG_LEVEL", "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.mode == "plan":
            if args.memory <= 0 or min(args.gpus) < 1 or args.tensor_max < 1 or args.experts_max < 1:
                raise InvalidConfigError("plan arguments must be positive")
            rows = planner_table(
                args.memory, args.gpus, args.tensor_max, args.experts_max,
                experts_min=args.experts_min, strict=not args.what_if,
            )
            text = _records_csv(rows, PLAN_COLUMNS) if args.format == "csv" else json.dumps(rows, indent=2) + "\n"
            _emit(text, args.out)
            return EXIT_OK

        rc = load_run_config(args, args.mode)
        cfg, model, flags = rc.validate()
        if flags.cac and not flags.ckpt:
            print("warning: --cac has no effect without --ckpt; ignoring it", file=sys.stderr)

        # the library warning duplicates the message above
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="cac has no effect")
            if args.mode == "train":
                report = cli_train(rc)
                _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
                return EXIT_OK

            if args.mode == "ledger":
                if args.predicted:
                    records = predict_comm_volume(model, cfg, flags, rc.steps)
                else:
                    records = simulate(model, cfg, flags, steps=rc.steps, tile=rc.tile).ledger.records()
                text = _records_csv(records, RECORD_FIELDS) if args.format == "csv" else json.dumps(records, indent=2) + "\n"
                _emit(text, args.out)
                return EXIT_OK

            results = cli_verify(rc, sweep=not args.no_sweep)
        failed = [r for r in results if not r.ok]
        if args.format == "json":
            text = json.dumps(
                {"version": REPORT_VERSION, "config": rc.resolved(), "checks": [asdict(r) for r in results],
                 "failed": len(failed)},
                indent=2,
            ) + "\n"
        else:
            text = "".join(r.line() + "\n" for r in results)
            text += f"{len(results) - len(failed)}/{len(results)} checks passed\n"
        _emit(text, args.out)
        for r in failed:
            print(r.line(), file=sys.stderr)
        return EXIT_FAIL if failed else EXIT_OK
    except InvalidConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
