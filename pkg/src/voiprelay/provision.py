"""Mock cloud lifecycle: keys, security groups, nodes, quotas and teardown.

Nothing here touches a real provider.  Node setup takes virtual time drawn
from the observed ranges (15-17 minutes from a base image, at most 3 minutes
from a pre-configured one) and every mutation is written to an audit log so
leaks can be detected per tracking id.
"""

import collections
import enum
import itertools
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (ConnectTimeout, DuplicateGroup, DuplicateKey, InjectedFault,
                     QuotaExceeded)
from .prng import XorShift64Star, mix_seed

log = logging.getLogger(__name__)

BASE_SETUP_S = (900.0, 1020.0)
PREBAKED_SETUP_S = (60.0, 180.0)
DEFAULT_DISK_GB = 8

SETUP_STEPS = (
    "install libasound2-dev",
    "install sox",
    "install ffmpeg",
    "install awscli",
    "install wondershaper",
    "install pulseaudio",
    "build relay software",
    "pull the source audio to the instance",
)

VCPU_TABLE = {"t2.nano": 1, "t2.micro": 1, "t2.small": 1, "t2.medium": 2, "t2.large": 2}

ANY_IPV4 = "0.0.0.0/0"
SIMULATION_RULES = (("tcp", 22, 22, ANY_IPV4), ("udp", 3000, 9000, ANY_IPV4))


def vcpus_for(instance_type):
    try:
        return VCPU_TABLE[instance_type]
    except KeyError:
        log.warning("unknown instance type %r; assuming 1 vCPU", instance_type)
        return 1


@dataclass(frozen=True)
class Quotas:
    max_vcpus: int = 100
    max_concurrent_connections: int = 10
    connect_timeout_s: float = 60.0

    def __post_init__(self):
        if self.max_vcpus <= 0 or self.max_concurrent_connections <= 0 or self.connect_timeout_s <= 0:
            raise ValueError("quotas must be positive")


@dataclass(frozen=True)
class KeyPair:
    name: str
    region: str
    created_at: float
    path: Path | None = None


@dataclass(frozen=True)
class SecurityGroup:
    name: str
    region: str
    rules: tuple = SIMULATION_RULES


class NodeState(enum.Enum):
    PENDING = "Pending"
    INSTALLING = "Installing"
    READY = "Ready"
    TERMINATED = "Terminated"


_NODE_EDGES = {
    (NodeState.PENDING, NodeState.INSTALLING),
    (NodeState.INSTALLING, NodeState.READY),
    (NodeState.PENDING, NodeState.TERMINATED),
    (NodeState.INSTALLING, NodeState.TERMINATED),
    (NodeState.READY, NodeState.TERMINATED),
}


@dataclass
class NodeSpec:
    name: str
    region: str
    instance_type: str
    ami: str
    tracking_id: str = "-"
    disk_gb: int = DEFAULT_DISK_GB


@dataclass
class ProvisionedNode:
    node_id: str
    name: str
    region: str
    instance_type: str
    ami: str
    tracking_id: str
    disk_gb: int = DEFAULT_DISK_GB
    state: NodeState = NodeState.PENDING
    launched_at: float = 0.0
    ready_at: float | None = None
    vcpus: int = 1
    setup_log: list = field(default_factory=list)

    def _move(self, new):
        if (self.state, new) not in _NODE_EDGES:
            raise ValueError(f"illegal node transition {self.state.value} -> {new.value}")
        self.state = new


class AuditLog:
    """Append-only lifecycle log: ``time  tracking_id  resource  action``."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.entries = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, tracking_id, resource, action, t_ms=0.0):
        entry = (float(t_ms), tracking_id, resource, action)
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with self.path.open("a") as f:
                    f.write("%.3f\t%s\t%s\t%s\n" % entry)

    def for_tracking_id(self, tracking_id):
        with self._lock:
            return [e for e in self.entries if e[1] == tracking_id]


class FaultInjector:
    """Decides whether a pipeline step should fail.

    ``always`` maps a tracking id (or ``"*"``) to step names that fail on
    every attempt; ``step_prob`` gives per-step failure probabilities drawn
    from a stream keyed by ``(seed, tracking_id, step, attempt)``.
    """

    def __init__(self, always=None, step_prob=None, seed=0):
        self.always = {k: set(v) for k, v in (always or {}).items()}
        self.step_prob = dict(step_prob or {})
        self.seed = seed

    def should_fail(self, tracking_id, step, attempt=0):
        for key in (tracking_id, "*"):
            if step in self.always.get(key, ()):
                return True
        p = self.step_prob.get(step, 0.0)
        if p <= 0.0:
            return False
        return XorShift64Star(mix_seed(self.seed, tracking_id, step, attempt)).random() < p

    def check(self, tracking_id, step, attempt=0):
        if self.should_fail(tracking_id, step, attempt):
            raise InjectedFault(step)


NO_FAULTS = FaultInjector()


class Provisioner:
    """Registry of live resources.  All mutations are serialized by one lock."""

    def __init__(self, quotas=None, key_dir=None, audit=None, faults=None, seed=0):
        self.quotas = quotas or Quotas()
        self.key_dir = Path(key_dir) if key_dir else None
        self.audit = audit if audit is not None else AuditLog()
        self.faults = faults or NO_FAULTS
        self.seed = seed
        self._lock = threading.Lock()
        self._keys = {}
        self._groups = {}
        self._nodes = {}
        self._owner = {}  # resource key -> tracking id
        self._ids = itertools.count(1)
        self.vcpus_in_use = 0
        self.peak_vcpus = 0

    # keys / groups ---------------------------------------------------------

    def create_key(self, region, name, clock=None, tracking_id="-"):
        t = clock.now_ms() if clock else 0.0
        with self._lock:
            if (region, name) in self._keys:
                raise DuplicateKey(f"key {name!r} already exists in {region}")
            path = None
            if self.key_dir is not None:
                path = self.key_dir / region / f"{name}.pem"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(f"mock private key {name} {region}\n")
                path.chmod(0o600)
            key = KeyPair(name, region, t, path)
            self._keys[(region, name)] = key
            self._owner[("key", region, name)] = tracking_id
        self.audit.record(tracking_id, f"key:{region}/{name}", "create", t)
        return key

    def create_security_group(self, region, name, clock=None, tracking_id="-"):
        t = clock.now_ms() if clock else 0.0
        with self._lock:
            if (region, name) in self._groups:
                raise DuplicateGroup(f"security group {name!r} already exists in {region}")
            group = SecurityGroup(name, region)
            self._groups[(region, name)] = group
            self._owner[("group", region, name)] = tracking_id
        self.audit.record(tracking_id, f"group:{region}/{name}", "create", t)
        return group

    # nodes -------------------------------------------------------------------

    def setup_delay_ms(self, node_name, use_prebaked_image):
        lo, hi = PREBAKED_SETUP_S if use_prebaked_image else BASE_SETUP_S
        rng = XorShift64Star(mix_seed(self.seed, node_name, use_prebaked_image))
        return rng.uniform(lo, hi) * 1000.0

    def launch_node(self, spec, key, group, use_prebaked_image, clock, attempt=0):
        """Start a node; returns once it is registered, with ``ready_at`` set.

        The caller waits (``clock.sleep_until(node.ready_at)``) so that
        several nodes can install concurrently in virtual time.
        """
        cost = vcpus_for(spec.instance_type)
        now = clock.now_ms()
        with self._lock:
            if self.vcpus_in_use + cost > self.quotas.max_vcpus:
                raise QuotaExceeded(cost, self.vcpus_in_use, self.quotas.max_vcpus)
            node = ProvisionedNode(f"i-{next(self._ids):08x}", spec.name, spec.region,
                                   spec.instance_type, spec.ami, spec.tracking_id,
                                   spec.disk_gb, launched_at=now, vcpus=cost)
            self._nodes[node.node_id] = node
            self.vcpus_in_use += cost
            self.peak_vcpus = max(self.peak_vcpus, self.vcpus_in_use)
        self.audit.record(spec.tracking_id, f"node:{node.node_id}", "launch", now)
        delay = self.setup_delay_ms(spec.name, use_prebaked_image)
        node._move(NodeState.INSTALLING)
        steps = ("boot pre-configured image",) if use_prebaked_image else SETUP_STEPS
        for step in steps:
            node.setup_log.append(step)
            log.debug("%s: %s", spec.name, step)
        if self.faults.should_fail(spec.tracking_id, "launch_node", attempt):
            # the setup session stalls past the connect timeout
            raise ConnectTimeout(f"{spec.name}: setup step exceeded "
                                 f"{self.quotas.connect_timeout_s:.0f} s connect timeout")
        node.ready_at = now + delay
        node._move(NodeState.READY)
        return node

    def terminate_node(self, node, clock=None):
        t = clock.now_ms() if clock else 0.0
        with self._lock:
            live = self._nodes.pop(node.node_id, None)
            if live is None:
                return False
            live.state = NodeState.TERMINATED
            self.vcpus_in_use -= live.vcpus
        self.audit.record(node.tracking_id, f"node:{node.node_id}", "terminate", t)
        return True

    def delete_key(self, key, clock=None, tracking_id="-"):
        t = clock.now_ms() if clock else 0.0
        with self._lock:
            if self._keys.pop((key.region, key.name), None) is None:
                return False
            self._owner.pop(("key", key.region, key.name), None)
        if key.path is not None:
            key.path.unlink(missing_ok=True)
        self.audit.record(tracking_id, f"key:{key.region}/{key.name}", "delete", t)
        return True

    def delete_group(self, group, clock=None, tracking_id="-"):
        t = clock.now_ms() if clock else 0.0
        with self._lock:
            if self._groups.pop((group.region, group.name), None) is None:
                return False
            self._owner.pop(("group", group.region, group.name), None)
        self.audit.record(tracking_id, f"group:{group.region}/{group.name}", "delete", t)
        return True

    def teardown(self, node=None, key=None, group=None, clock=None, tracking_id="-"):
        """Release whatever of node/key/group is still live.  Idempotent."""
        released = []
        if node is not None and self.terminate_node(node, clock):
            released.append(f"node:{node.node_id}")
        if group is not None and self.delete_group(group, clock, tracking_id):
            released.append(f"group:{group.region}/{group.name}")
        if key is not None and self.delete_key(key, clock, tracking_id):
            released.append(f"key:{key.region}/{key.name}")
        return {"tracking_id": tracking_id, "released": released,
                "leaked": self.leaked(tracking_id)}

    def purge(self, tracking_id, clock=None):
        """Release every resource owned by ``tracking_id``."""
        with self._lock:
            nodes = [n for n in self._nodes.values() if n.tracking_id == tracking_id]
            keys = [k for (kind, r, n), tid in self._owner.items()
                    if tid == tracking_id and kind == "key" for k in [self._keys[(r, n)]]]
            groups = [g for (kind, r, n), tid in self._owner.items()
                      if tid == tracking_id and kind == "group" for g in [self._groups[(r, n)]]]
        for n in nodes:
            self.terminate_node(n, clock)
        for g in groups:
            self.delete_group(g, clock, tracking_id)
        for k in keys:
            self.delete_key(k, clock, tracking_id)

    # accounting --------------------------------------------------------------

    def leaked(self, tracking_id=None):
        """Live resources, optionally restricted to one tracking id."""
        with self._lock:
            out = [f"node:{n.node_id}" for n in self._nodes.values()
                   if tracking_id is None or n.tracking_id == tracking_id]
            out += [f"{kind}:{r}/{n}" for (kind, r, n), tid in self._owner.items()
                    if tracking_id is None or tid == tracking_id]
        return out

    def audit_balance(self, tracking_id=None):
        """``{resource kind: created - deleted}`` computed from the audit log."""
        bal = collections.Counter()
        for _, tid, resource, action in list(self.audit.entries):
            if tracking_id is not None and tid != tracking_id:
                continue
            kind = resource.split(":", 1)[0]
            if action in ("create", "launch"):
                bal[kind] += 1
            elif action in ("delete", "terminate"):
                bal[kind] -= 1
        return {k: bal.get(k, 0) for k in ("key", "group", "node")}

    @property
    def empty(self):
        return not self.leaked()


class ConnectionPool:
    """FIFO-fair counting semaphore modelling the SSH session limit.

    ``request(n)`` queues a claim for ``n`` slots and returns a ticket;
    tickets are granted strictly in arrival order, so a large claim is never
    starved by later small ones.
    """

    def __init__(self, quotas=None):
        self.quotas = quotas or Quotas()
        self.capacity = self.quotas.max_concurrent_connections
        self.in_use = 0
        self.peak = 0
        self._waiters = collections.deque()
        self._cond = threading.Condition()

    def request(self, n=1):
        if n > self.capacity:
            raise ValueError(f"cannot hold {n} connections under a cap of {self.capacity}")
        ticket = ConnectionToken(self, n)
        with self._cond:
            self._waiters.append(ticket)
            self._grant()
        return ticket

    def _grant(self):
        while self._waiters and self.in_use + self._waiters[0].n <= self.capacity:
            t = self._waiters.popleft()
            self.in_use += t.n
            self.peak = max(self.peak, self.in_use)
            t.granted = True
        self._cond.notify_all()

    def acquire(self, n=1, timeout_s=None):
        """Block until ``n`` slots are held; ``ConnectTimeout`` after the timeout."""
        if timeout_s is None:
            timeout_s = self.quotas.connect_timeout_s
        ticket = self.request(n)
        with self._cond:
            if not self._cond.wait_for(lambda: ticket.granted, timeout_s):
                self._waiters.remove(ticket)
                raise ConnectTimeout(f"no connection slot within {timeout_s} s")
        return ticket

    def _release(self, ticket):
        with self._cond:
            if ticket.granted and not ticket.released:
                ticket.released = True
                self.in_use -= ticket.n
                self._grant()
            elif not ticket.granted and ticket in self._waiters:
                self._waiters.remove(ticket)
                ticket.released = True
                self._grant()

    @property
    def waiting(self):
        with self._cond:
            return len(self._waiters)


class ConnectionToken:
    def __init__(self, pool, n):
        self.pool = pool
        self.n = n
        self.granted = False
        self.released = False

    def release(self):
        self.pool._release(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


def acquire_connection(pool, n=1, timeout_s=None):
    return pool.acquire(n, timeout_s)
