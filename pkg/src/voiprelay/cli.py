"""Command-line entry points.

Subcommands mirror the original scripts: ``simulate`` (base image),
``simulate-ami`` (pre-configured image), ``dynamic-mix``, plus ``sweep``,
``report`` and ``make-corpus``.  Exit status: 0 success, 1 job failure,
2 usage error.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import simconfig
from .corpus import default_corpus_root, write_demo_corpus
from .errors import ConfigError, EmptySource
from .evalkit import ConstantBitrate, sweep
from .netem import ImpairmentProfile
from .orchestrator import (JobRecord, SimulationContext, compute_report, dynamic_mix,
                           run_simulation)
from .provision import Quotas
from .transport import MemoryNetwork, UdpNetwork

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("voiprelay")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _notice_aws_credentials(out):
    if os.environ.get("AWS_ACCESS_KEY_ID") or os.environ.get("AWS_SECRET_ACCESS_KEY"):
        print("notice: AWS credentials found in the environment; the simulator does not use them",
              file=out)


def _add_environment_flags(p):
    p.add_argument("--object-root", default=os.environ.get("OBJECT_ROOT", "objects"))
    p.add_argument("--corpus-root", default=None)
    p.add_argument("--log-root", default=os.environ.get("LOG_ROOT", "logs"))
    p.add_argument("--work-dir", default=None)
    p.add_argument("--max-vcpus", type=int, default=100)
    p.add_argument("--max-connections", type=int, default=10)
    p.add_argument("--backend", choices=("memory", "udp"), default="memory")
    p.add_argument("--frame-ms", type=int, default=20)
    p.add_argument("-v", "--verbose", action="store_true")


def _context(ns, seed=0):
    ctx = SimulationContext.create(
        ns.work_dir or os.environ.get("WORK_DIR", ".voiprelay"),
        corpus_root=ns.corpus_root or default_corpus_root(),
        quotas=Quotas(max_vcpus=ns.max_vcpus, max_concurrent_connections=ns.max_connections),
        seed=seed,
        network_factory=UdpNetwork if ns.backend == "udp" else MemoryNetwork,
        frame_ms=ns.frame_ms,
    )
    ctx.object_store.root = Path(ns.object_root)
    ctx.log_root = Path(ns.log_root)
    return ctx


def _free_tracking_id(log_root, seed):
    # counter continues past runs already present in the logging directory
    k = 0
    while (Path(log_root) / simconfig.generate_tracking_id(seed, k)).exists():
        k += 1
    return simconfig.generate_tracking_id(seed, k)


def _simulation_parser(prog):
    p = simconfig.add_simulation_flags(_Parser(prog=prog, allow_abbrev=False))
    _add_environment_flags(p)
    return p


def cmd_simulate(argv, out=sys.stdout, prebaked=False):
    prog = "voiprelay simulate-ami" if prebaked else "voiprelay simulate"
    parser = _simulation_parser(prog)
    try:
        ns = parser.parse_args(argv)
        config = simconfig.validate(simconfig.config_from_namespace(ns))
    except (UsageError, ConfigError) as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if prebaked and not config.use_prebaked_image:
        config = dataclasses.replace(config, use_prebaked_image=True)
    _setup_logging(ns.verbose)
    _notice_aws_credentials(out)
    ctx = _context(ns, config.seed)
    if ns.tracking_id is None:
        config = dataclasses.replace(config, tracking_id=_free_tracking_id(ctx.log_root, config.seed))
    rec = run_simulation(config, ctx)
    record_path = ctx.log_root / rec.tracking_id / "record.json"
    setup = rec.timings.get("launch_node", 0.0) / 60000.0
    print(f"tracking id: {rec.tracking_id}", file=out)
    print(f"outcome: {rec.outcome}" + ("" if rec.ok else f" at {rec.failed_step}: {rec.reason}"),
          file=out)
    print(f"setup time: {setup:.2f} virtual minutes", file=out)
    if rec.ok:
        print(f"recording: {rec.output}", file=out)
    print(f"job record: {record_path}", file=out)
    return EXIT_OK if rec.ok else EXIT_FAILURE


def cmd_dynamic_mix(argv, out=sys.stdout):
    p = _Parser(prog="voiprelay dynamic-mix", allow_abbrev=False)
    p.add_argument("--src_dir", "--src-dir", required=True)
    p.add_argument("--relay_dir", "--relay-dir", required=True)
    p.add_argument("--clean_dir", "--clean-dir", required=True)
    p.add_argument("--num", type=int, required=True, help="number of parallel simulations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kbps", type=int, default=1000)
    p.add_argument("--loss", type=float, default=0.0)
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    _add_environment_flags(p)
    try:
        ns = p.parse_args(argv)
        if ns.num < 1:
            raise UsageError("--num must be a positive integer")
    except UsageError as e:
        print(p.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(ns.verbose)
    _notice_aws_credentials(out)
    ctx = _context(ns, ns.seed)
    settings = {"kbps": ns.kbps, "loss_prob": ns.loss, "latency_ms": ns.latency,
                "jitter_ms": ns.jitter}
    try:
        result = dynamic_mix(ns.src_dir, ns.relay_dir, ns.clean_dir, ns.num, ctx, seed=ns.seed,
                             settings=settings)
    except EmptySource as e:
        print(f"EmptySource: {e}", file=out)
        return EXIT_FAILURE
    started = sum(1 for e in result.trace if e[1] == "start")
    print(f"workers started: {started}/{ns.num}", file=out)
    print(result.report.summary(), file=out)
    return EXIT_OK if result.report.failures == 0 else EXIT_FAILURE


def _floats(text):
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_sweep(argv, out=sys.stdout):
    parser = _simulation_parser("voiprelay sweep")
    parser.add_argument("--rates", default=None, help="comma-separated kbps values")
    parser.add_argument("--losses", default="0")
    parser.add_argument("--latencies", default="0")
    parser.add_argument("--jitters", default="0")
    parser.add_argument("--parallelism", type=int, default=4)
    parser.add_argument("--cbr-kbps", type=float, default=None,
                        help="drive the channel with synthetic constant-bitrate traffic")
    try:
        ns = parser.parse_args(argv)
        base = simconfig.validate(simconfig.config_from_namespace(ns))
        rates = [int(r) for r in _floats(ns.rates)] if ns.rates else [base.sender_up_kbps]
        grid = [ImpairmentProfile(r, lat, jit, loss, seed=0, bucket_depth_bytes=base.bucket_depth_bytes)
                for r in rates for loss in _floats(ns.losses)
                for lat in _floats(ns.latencies) for jit in _floats(ns.jitters)]
    except (UsageError, ConfigError, ValueError) as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(ns.verbose)
    ctx = _context(ns, base.seed)
    workload = ConstantBitrate(ns.cbr_kbps, base.duration_s) if ns.cbr_kbps else None
    table = sweep(grid, base, ctx, workload=workload, parallelism=ns.parallelism)
    out.write(table.to_tsv())
    return EXIT_OK if all(r.outcome == "Success" for r in table.rows) else EXIT_FAILURE


def load_records(log_root, ids=("all",)):
    log_root = Path(log_root)
    if not log_root.is_dir():
        return []
    if list(ids) in ([], ["all"]):
        paths = sorted(log_root.glob("*/record.json"))
    else:
        paths = [log_root / i / "record.json" for i in ids]
    return [JobRecord.from_dict(json.loads(p.read_text())) for p in paths if p.is_file()]


def cmd_report(argv, out=sys.stdout):
    p = _Parser(prog="voiprelay report", allow_abbrev=False)
    p.add_argument("ids", nargs="*", default=["all"], help="tracking ids, or 'all'")
    p.add_argument("--log-root", default=os.environ.get("LOG_ROOT", "logs"))
    try:
        ns = p.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    report = compute_report(load_records(ns.log_root, ns.ids))
    for r in report.records:
        if not r.ok:
            print(f"FAILED {r.tracking_id}: {r.failed_step}: {r.reason}", file=out)
    print(report.summary(), file=out)
    return EXIT_OK


def cmd_make_corpus(argv, out=sys.stdout):
    p = _Parser(prog="voiprelay make-corpus", allow_abbrev=False)
    p.add_argument("root")
    try:
        ns = p.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    for path in write_demo_corpus(ns.root):
        print(path, file=out)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "simulate-ami": lambda argv, out=sys.stdout: cmd_simulate(argv, out, prebaked=True),
    "dynamic-mix": cmd_dynamic_mix,
    "dynamic_mixing": cmd_dynamic_mix,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "make-corpus": cmd_make_corpus,
}


def _setup_logging(verbose):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None, out=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: voiprelay {" + ",".join(COMMANDS) + "} [flags]", file=out)
        return EXIT_OK if argv else EXIT_USAGE
    cmd = COMMANDS.get(argv[0])
    if cmd is None:
        print(f"error: unknown command {argv[0]!r}", file=sys.stderr)
        return EXIT_USAGE
    return cmd(argv[1:], out)


if __name__ == "__main__":
    sys.exit(main())
