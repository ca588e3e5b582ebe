"""Simulation parameter record and its command-line grammar.

The short flag names (``--sreg``, ``--subw`` ...) are the ones used by the
original cloud scripts; each also has a long alias.
"""

import argparse
import itertools
import shlex
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import (ConfigError, DuplicateFlag, MalformedValue,
                     MissingFlag, NonPositive, UnknownFlag)
from .storage import parse_storage_url

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SimulationConfig:
    sender_region: str
    receiver_region: str
    sender_instance_type: str
    receiver_instance_type: str
    sender_ami: str
    receiver_ami: str
    sender_up_kbps: int
    sender_down_kbps: int
    receiver_up_kbps: int
    receiver_down_kbps: int
    src_audio_config: str
    duration_s: int
    storage_url: str
    tracking_id: str | None = None
    use_prebaked_image: bool = False
    seed: int = 0
    disk_gb: int = 8
    # channel extensions, applied on the sender uplink
    loss_prob: float = 0.0
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    bucket_depth_bytes: int = 2400


# (short flag, long alias, field, converter); order is the render order.
_REQUIRED = [
    ("--sreg", "--sender-region", "sender_region", str),
    ("--rreg", "--receiver-region", "receiver_region", str),
    ("--sins", "--sender-instance-type", "sender_instance_type", str),
    ("--rins", "--receiver-instance-type", "receiver_instance_type", str),
    ("--sami", "--sender-ami", "sender_ami", str),
    ("--rami", "--receiver-ami", "receiver_ami", str),
    ("--src", "--src-audio-config", "src_audio_config", str),
    ("--dur", "--duration", "duration_s", int),
    ("--subw", "--sender-up-kbps", "sender_up_kbps", int),
    ("--sdbw", "--sender-down-kbps", "sender_down_kbps", int),
    ("--rubw", "--receiver-up-kbps", "receiver_up_kbps", int),
    ("--rdbw", "--receiver-down-kbps", "receiver_down_kbps", int),
    ("--s3", "--storage-url", "storage_url", str),
]
_OPTIONAL = [
    ("--tid", "--tracking-id", "tracking_id", str),
    ("--seed", None, "seed", int),
    ("--disk", "--disk-gb", "disk_gb", int),
    ("--loss", None, "loss_prob", float),
    ("--latency", None, "latency_ms", float),
    ("--jitter", None, "jitter_ms", float),
    ("--bucket", "--bucket-depth", "bucket_depth_bytes", int),
]
REQUIRED_FLAGS = [short for short, *_ in _REQUIRED]

_BANDWIDTHS = ("sender_up_kbps", "sender_down_kbps", "receiver_up_kbps", "receiver_down_kbps")


def generate_tracking_id(seed, counter):
    """``sim-<seed hex>-<counter>``: deterministic and injective in ``counter``."""
    if counter < 0:
        raise ValueError("counter must be nonnegative")
    return f"sim-{int(seed) & MASK64:016x}-{counter:06d}"


_process_counter = itertools.count()


def next_tracking_id(seed):
    """Fresh id, unique within this process."""
    return generate_tracking_id(seed, next(_process_counter))


class _RaisingParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


class _Once(argparse.Action):
    def __call__(self, parser, namespace, values, option_string=None):
        if getattr(namespace, self.dest, None) is not None:
            raise DuplicateFlag(option_string)
        setattr(namespace, self.dest, (option_string, values))


class _OnceFlag(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        if getattr(namespace, self.dest, None):
            raise DuplicateFlag(option_string)
        setattr(namespace, self.dest, True)


def add_simulation_flags(parser):
    for short, long, dest, _ in _REQUIRED + _OPTIONAL:
        names = [short] + ([long] if long else [])
        parser.add_argument(*names, dest=dest, action=_Once, default=None, metavar=dest.upper())
    parser.add_argument("--prebaked", dest="use_prebaked_image", action=_OnceFlag, default=False,
                        help="use the pre-configured image (fast setup path)")
    return parser


def build_parser(prog="simulate"):
    return add_simulation_flags(_RaisingParser(prog=prog, allow_abbrev=False, add_help=False))


def config_from_namespace(ns):
    values = {}
    for short, _, dest, conv in _REQUIRED + _OPTIONAL:
        got = getattr(ns, dest)
        if got is None:
            if short in REQUIRED_FLAGS:
                raise MissingFlag(short)
            continue
        flag, text = got
        try:
            values[dest] = conv(text)
        except ValueError:
            raise MalformedValue(flag, text) from None
    values["use_prebaked_image"] = bool(ns.use_prebaked_image)
    if "tracking_id" not in values:
        values["tracking_id"] = next_tracking_id(values.get("seed", 0))
    return SimulationConfig(**values)


def parse_simulation_args(argv):
    """Parse a flag list into a :class:`SimulationConfig`.

    Flags may be given as ``--flag value`` or ``--flag=value``.  Missing
    required flags are reported in the order of the parameter table.
    """
    ns, extra = build_parser().parse_known_args(list(argv))
    if extra:
        raise UnknownFlag(extra[0])
    return config_from_namespace(ns)


def _flag(argv, flag, text):
    # values that look like flags must be attached with "="
    if text.startswith("-"):
        argv.append(f"{flag}={text}")
    else:
        argv += [flag, text]


def render_simulation_args(config):
    """Inverse of :func:`parse_simulation_args`."""
    argv = []
    for short, _, dest, _ in _REQUIRED:
        _flag(argv, short, str(getattr(config, dest)))
    defaults = {f.name: f.default for f in fields(SimulationConfig)}
    for short, _, dest, _ in _OPTIONAL:
        value = getattr(config, dest)
        if value is not None and value != defaults[dest]:
            _flag(argv, short, repr(value) if isinstance(value, float) else str(value))
    if config.use_prebaked_image:
        argv.append("--prebaked")
    return argv


def load_config_file(path):
    """Read a ``key=value`` (or ``key value``) file, one flag per line."""
    argv = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, _, value = line.partition(" ")
        key, value = key.strip(), value.strip()
        if not key.startswith("-"):
            key = "--" + key
        if key == "--prebaked":
            if value.lower() in ("", "1", "true", "yes"):
                argv.append(key)
            continue
        argv += [key, value]
    return parse_simulation_args(argv)


def validate(config):
    """Return ``config`` unchanged if every invariant holds."""
    for name in _BANDWIDTHS + ("duration_s", "disk_gb", "bucket_depth_bytes"):
        if getattr(config, name) <= 0:
            raise NonPositive(name)
    if not 0.0 <= config.loss_prob <= 1.0:
        raise ConfigError(f"loss_prob must be in [0, 1], got {config.loss_prob}")
    if config.latency_ms < 0 or config.jitter_ms < 0:
        raise ConfigError("latency and jitter must be nonnegative")
    if not 0 <= config.seed <= MASK64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    parse_storage_url(config.storage_url)
    return config


def with_tracking_id(config, tracking_id):
    return replace(config, tracking_id=tracking_id)


def format_command(config, prog="voiprelay simulate"):
    return " ".join([prog] + [shlex.quote(a) for a in render_simulation_args(config)])
