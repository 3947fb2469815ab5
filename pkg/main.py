"""
shardtrain - desk-scale sharded SwAV training stack
Command-line entry point
"""
import argparse
import json
import logging
import os
import sys

import dotenv

from core.errors import ShardTrainError

dotenv.load_dotenv()

LOGGER = logging.getLogger("shardtrain")


def emit(payload, out=None):
    out = out or sys.stdout
    out.write(json.dumps(payload) + "\n")
    out.flush()


def cmd_train(args) -> int:
    from core.run_config import RunConfig, fabric_mode, fabric_timeout
    from core.trainer import TrainingRun

    config = RunConfig.load(args.config)
    metrics_path = args.metrics or config.metrics_path
    out = open(metrics_path, "w", encoding="utf-8") if metrics_path else sys.stdout
    try:
        LOGGER.info("Setting up fabric (%s, %d ranks)...", fabric_mode(), config.world_size)
        run = TrainingRun(config, fabric_mode(), fabric_timeout(), on_metrics=lambda record: emit(record, out))
        result = run.run(resume_from=args.resume)
    finally:
        if out is not sys.stdout:
            out.close()
    if result.metrics:
        LOGGER.info("Finished: loss %.6f -> %.6f", result.metrics[0]["loss"], result.metrics[-1]["loss"])
    return 0


def cmd_plan(args) -> int:
    from core import ckptplan
    from core.run_config import PLAN_INPUT_SCHEMA, load_document

    data = load_document(args.input, PLAN_INPUT_SCHEMA)
    m, flops = data["m"], data.get("flops")
    if "boundaries" in data:
        plan = ckptplan.plan_from_boundaries(m, data["boundaries"], flops)
    elif "n_segments" in data:
        plan = ckptplan.plan(m, data["n_segments"], flops)
    else:
        plan = ckptplan.auto_plan(m, data.get("budget", sum(m)), flops)
    emit(plan.to_dict())
    return 0


def cmd_reshard(args) -> int:
    from core import ckptstore

    if args.mode == "to-slices":
        written = ckptstore.consolidate_to_sliced(args.input, args.output)
    else:
        if args.world is None:
            raise argparse.ArgumentTypeError("--world is required for --mode to-shards")
        written = ckptstore.slices_to_sharded(args.input, args.output, args.world)
    summary = ckptstore.checkpoint_summary(args.output)
    summary["files"] = sorted(p.name for p in written)
    emit(summary)
    return 0


def cmd_probe(args) -> int:
    from core.ckptstore import load_sliced
    from core.fsdp import consolidate
    from core.probe import extract_features, train_probe
    from core.run_config import RunConfig
    from core.trainer import make_dataset

    config = RunConfig.load(args.config)
    net, _ = consolidate([load_sliced(args.slices, 0, 1)])
    samples, labels = make_dataset(config)
    result = train_probe(extract_features(net, samples), labels, config.probe())
    emit(result.to_dict())
    return 0


def cmd_widths(args) -> int:
    from core.netspec import PRESETS, generate_widths, widths_csv
    from core.run_config import RunConfig

    regnet = PRESETS[args.preset][0] if args.preset else RunConfig.load(args.config).regnet()
    widths, depths = generate_widths(regnet)
    sys.stdout.write(widths_csv(widths, depths))
    return 0


def cmd_simulate_schedule(args) -> int:
    from core.fsdp import simulate_schedule
    from core.run_config import SCHEDULE_INPUT_SCHEMA, load_document

    data = load_document(args.input, SCHEDULE_INPUT_SCHEMA)
    fp16 = data.get("fp16_params", False)
    serial = simulate_schedule(data["comm"], data["compute"], prefetch=False, fp16_params=fp16)
    overlapped = simulate_schedule(data["comm"], data["compute"], prefetch=True, fp16_params=fp16)
    emit({"serial_makespan": serial.makespan, "prefetch_makespan": overlapped.makespan,
          "events": overlapped.to_dict()["events"]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardtrain", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Run sharded SwAV training from a run config")
    train.add_argument("--config", required=True)
    train.add_argument("--metrics", help="JSON-lines metrics file (default: stdout)")
    train.add_argument("--resume", help="Sharded checkpoint directory to resume from")
    train.set_defaults(func=cmd_train)

    plan = sub.add_parser("plan", help="Plan activation checkpoints for a memory profile")
    plan.add_argument("--input", required=True)
    plan.set_defaults(func=cmd_plan)

    reshard = sub.add_parser("reshard", help="Convert between sharded and sliced checkpoints")
    reshard.add_argument("--in", dest="input", required=True)
    reshard.add_argument("--out", dest="output", required=True)
    reshard.add_argument("--mode", choices=["to-slices", "to-shards"], required=True)
    reshard.add_argument("--world", type=int)
    reshard.set_defaults(func=cmd_reshard)

    probe = sub.add_parser("probe", help="Linear probe on a sliced checkpoint")
    probe.add_argument("--config", required=True)
    probe.add_argument("--slices", required=True)
    probe.set_defaults(func=cmd_probe)

    widths = sub.add_parser("widths", help="Print the stage table as CSV")
    group = widths.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--preset")
    widths.set_defaults(func=cmd_widths)

    schedule = sub.add_parser("simulate-schedule", help="Compare serial and prefetch all-gather schedules")
    schedule.add_argument("--input", required=True)
    schedule.set_defaults(func=cmd_simulate_schedule)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=os.getenv("SHARDTRAIN_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ShardTrainError as e:
        LOGGER.error("%s", e)
        return e.exit_code
    except KeyError as e:
        LOGGER.error("Unknown name %s", e)
        return 2
    except argparse.ArgumentTypeError as e:
        LOGGER.error("%s", e)
        return 2
    except OSError as e:
        LOGGER.error("%s", e)
        return 4


if __name__ == "__main__":
    sys.exit(main())
