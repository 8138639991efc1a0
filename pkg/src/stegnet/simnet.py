"""Deterministic desk-scale packet network simulator.

Virtual time is an integer microsecond counter driven by a single event
heap; ties break on insertion order, so a run is a pure function of its
inputs and seed.  Links serialize packets FIFO at their configured
capacity (octets per second) plus a fixed propagation delay, which
preserves the in-order, no-loss carrier contract the gateway pair
relies on.

Node kinds map to behaviors: hosts terminate traffic, answer service
requests statelessly, and optionally run a paced workload generator;
routers forward; monitors apply a first-match rule list, optional
address translation, and a checksum anomaly counter; covert gateways
wrap a fuse/extract engine around everything crossing toward or from
their peer.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Set, Tuple

from . import packet as pk
from . import topology as topo_mod
from . import trace as trace_mod
from .engine import CovertGateway, DesyncError, EngineConfig

MICROS = 1_000_000

SERVICE_PORTS = {
    "http": 80,
    "tls": 443,
    "tcp": 9000,
}
UDP_SERVICE_PORT = 5353
SECRET_PORT = 9999

DEFAULT_MIX = {
    "http": 0.31,
    "tls": 0.15,
    "tcp": 0.18,
    "udp": 0.18,
    "icmp": 0.18,
}


class SimError(Exception):
    pass


@dataclass
class WorkloadSpec:
    """Visible-traffic shape for every workload-flagged host."""

    budget: int = 20_000  # octets per second per client
    mix: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIX))
    restart_every: int = 8  # requests per flow before a fresh handshake
    min_frame: int = 140
    max_frame: int = 1400
    icmp_payload: int = 56

    def validate(self) -> None:
        if self.budget <= 0:
            raise ValueError("workload budget must be positive")
        if set(self.mix) != set(DEFAULT_MIX):
            raise ValueError("mix must weight exactly %s" % sorted(DEFAULT_MIX))
        total = sum(self.mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError("mix weights must sum to 1, got %r" % total)
        if self.restart_every < 1:
            raise ValueError("restart_every must be at least 1")
        if not 0 < self.min_frame <= self.max_frame <= 1400:
            raise ValueError("frame bounds must satisfy 0 < min <= max <= 1400")


_WORKLOAD_KEYS = ("budget", "http", "tls", "tcp", "udp", "icmp", "restart_every", "min_frame", "max_frame", "icmp_payload")


def parse_workload(text: str) -> WorkloadSpec:
    """Key = value lines, optionally under a [workload] header."""
    spec = WorkloadSpec()
    mix = dict(spec.mix)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line.strip() != "[workload]":
                raise topo_mod.ConfigError(lineno, "unknown section %r in workload file" % line.strip())
            continue
        if "=" not in line:
            raise topo_mod.ConfigError(lineno, "expected 'key = value', got %r" % raw.strip())
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _WORKLOAD_KEYS:
            raise topo_mod.ConfigError(lineno, "unknown workload key %r" % key)
        try:
            if key in ("budget", "restart_every", "min_frame", "max_frame", "icmp_payload"):
                setattr(spec, key, int(value))
            else:
                mix[key] = float(value)
        except ValueError:
            raise topo_mod.ConfigError(lineno, "bad value %r for %s" % (value, key)) from None
    spec.mix = mix
    spec.validate()
    return spec


def _child_rng(seed: int, name: str) -> random.Random:
    digest = hashlib.sha256(("%d:%s" % (seed, name)).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _stable_hash(*parts) -> int:
    text = ":".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def _safe_isn(*parts) -> int:
    """Deterministic initial sequence number whose leading octet can
    never be mistaken for a synchronization header code."""
    h = _stable_hash("isn", *parts)
    return ((0x40 | (h >> 56) & 0x3F) << 24) | (h & 0xFFFFFF)


@dataclass
class _Pipe:
    src: str
    dst: str
    capacity: int  # octets per second
    delay_us: int = 0
    busy_until: int = 0
    carried_packets: int = 0
    carried_octets: int = 0

    def transit(self, now: int, size: int) -> int:
        start = max(now, self.busy_until)
        tx_us = -(-size * MICROS // self.capacity)  # ceil
        self.busy_until = start + tx_us
        self.carried_packets += 1
        self.carried_octets += size
        return self.busy_until + self.delay_us


@dataclass
class NodeStats:
    sent: int = 0
    received: int = 0
    forwarded: int = 0
    dropped: int = 0


@dataclass
class MonitorStats:
    seen: int = 0
    rule_hits: Dict[int, int] = field(default_factory=dict)
    log_hits: int = 0
    rule_drops: int = 0
    default_drops: int = 0
    nat_drops: int = 0
    checksum_anomalies: int = 0
    addresses: Set[Tuple[int, int]] = field(default_factory=set)


@dataclass
class _FlowState:
    sport: int
    seq: int
    requests: int = 0


class _WorkloadClient:
    """Paced visible-traffic source bound to one host."""

    def __init__(self, sim: "Simulation", host: str, target: str, spec: WorkloadSpec, rng: random.Random):
        self.sim = sim
        self.host = host
        self.target = target
        self.spec = spec
        self.rng = rng
        self.flows: Dict[str, _FlowState] = {}
        self.flow_serial = 0
        self.emitted_octets = 0
        self.kind_counts: Dict[str, int] = {k: 0 for k in DEFAULT_MIX}
        self.icmp_seq = 0

    def start(self, offset_us: int) -> None:
        self.sim._schedule(offset_us, self.tick)

    def _pick_kind(self) -> str:
        roll = self.rng.random()
        acc = 0.0
        for kind in ("http", "tls", "tcp", "udp", "icmp"):
            acc += self.spec.mix[kind]
            if roll < acc:
                return kind
        return "icmp"

    def tick(self) -> None:
        sim = self.sim
        me = sim.topology.nodes[self.host]
        peer = sim.topology.nodes[self.target]
        kind = self._pick_kind()
        self.kind_counts[kind] += 1
        if kind in SERVICE_PORTS:
            p = self._tcp_request(me, peer, kind)
        elif kind == "udp":
            payload = self.rng.randbytes(self.rng.randint(80, 400))
            p = pk.build_udp(me.ip, peer.ip, 30000 + (self.flow_serial % 1000), UDP_SERVICE_PORT,
                             payload=payload, src_mac=me.mac, dst_mac=peer.mac)
        else:
            payload = self.rng.randbytes(self.spec.icmp_payload)
            self.icmp_seq += 1
            p = pk.build_icmp_echo(me.ip, peer.ip, identifier=_stable_hash("ping", self.host) & 0x7FFF,
                                   sequence=self.icmp_seq & 0xFFFF, payload=payload,
                                   src_mac=me.mac, dst_mac=peer.mac)
        size = p.wire_len
        self.emitted_octets += size
        sim.send_from(self.host, p)
        gap = -(-size * MICROS // self.spec.budget)
        sim._schedule(sim.now + gap, self.tick)

    def _tcp_request(self, me, peer, kind: str) -> pk.ParsedPacket:
        port = SERVICE_PORTS[kind]
        flow = self.flows.get(kind)
        if flow is None or flow.requests >= self.spec.restart_every:
            self.flow_serial += 1
            sport = 20000 + len(SERVICE_PORTS) * self.flow_serial + port % 3
            flow = _FlowState(sport=sport, seq=_safe_isn(self.host, kind, self.flow_serial))
            self.flows[kind] = flow
            return pk.build_tcp(me.ip, peer.ip, flow.sport, port, seq=flow.seq,
                                flags=pk.TCP_SYN, src_mac=me.mac, dst_mac=peer.mac)
        payload = self.rng.randbytes(self.rng.randint(self.spec.min_frame, self.spec.max_frame))
        flow.requests += 1
        p = pk.build_tcp(me.ip, peer.ip, flow.sport, port, seq=flow.seq,
                         ack=1, flags=pk.TCP_ACK | pk.TCP_PSH, payload=payload,
                         src_mac=me.mac, dst_mac=peer.mac)
        flow.seq = (flow.seq + len(payload)) & 0xFFFFFFFF
        return p


class _BulkTransfer:
    """Covert payload drain: all packets offered up front."""

    def __init__(self, sim: "Simulation", src: str, dst: str, payload_octets: int, packet_size: int, start_us: int):
        self.sim = sim
        self.src = src
        self.dst = dst
        self.payload_octets = payload_octets
        self.packet_size = packet_size
        self.start_us = start_us
        self.sent_packets = 0
        self.delivered_octets = 0
        self.delivered_packets = 0
        self.finished_us: Optional[int] = None
        self.digest_parts: List[bytes] = []
        self.delivered_parts: List[bytes] = []

    def start(self) -> None:
        rng = _child_rng(self.sim.seed, "bulk:%s:%s" % (self.src, self.dst))
        me = self.sim.topology.nodes[self.src]
        peer = self.sim.topology.nodes[self.dst]
        remaining = self.payload_octets
        seq = _safe_isn(self.src, "bulk")
        while remaining > 0:
            size = min(self.packet_size, remaining)
            payload = rng.randbytes(size)
            self.digest_parts.append(payload)
            p = pk.build_tcp(me.ip, peer.ip, 41000, SECRET_PORT, seq=seq,
                             flags=pk.TCP_ACK | pk.TCP_PSH, payload=payload,
                             src_mac=me.mac, dst_mac=peer.mac)
            seq = (seq + size) & 0xFFFFFFFF
            self.sim.send_from(self.src, p)
            self.sent_packets += 1
            remaining -= size

    @property
    def sent_digest(self) -> str:
        return hashlib.sha256(b"".join(self.digest_parts)).hexdigest()

    @property
    def delivered_digest(self) -> str:
        return hashlib.sha256(b"".join(self.delivered_parts)).hexdigest()


class _PacedTransfer:
    """Stop-and-wait covert sender with a fixed retransmission timeout.

    Sends one request, waits for the peer's acknowledgement to come back
    through the channel, and retransmits when the timeout lapses first.
    The per-interval send counts (demand plus retransmissions) feed the
    stability metric.
    """

    def __init__(self, sim: "Simulation", src: str, dst: str, packets: int, packet_size: int, rto_us: int, start_us: int):
        self.sim = sim
        self.src = src
        self.dst = dst
        self.packets = packets
        self.packet_size = packet_size
        self.rto_us = rto_us
        self.start_us = start_us
        self.next_index = 0
        self.awaiting: Optional[int] = None
        self.retransmissions = 0
        self.delivered_packets = 0
        self.finished_us: Optional[int] = None

    def start(self) -> None:
        self._send_next()

    def _send_next(self) -> None:
        if self.next_index >= self.packets:
            self.finished_us = self.sim.now
            return
        self.awaiting = self.next_index
        self._emit(self.next_index)

    def _emit(self, index: int) -> None:
        me = self.sim.topology.nodes[self.src]
        peer = self.sim.topology.nodes[self.dst]
        rng = _child_rng(self.sim.seed, "paced:%s:%d" % (self.src, index))
        payload = rng.randbytes(self.packet_size)
        p = pk.build_tcp(me.ip, peer.ip, 42000, SECRET_PORT,
                         seq=(_safe_isn(self.src, "paced") + index) & 0xFFFFFFFF,
                         flags=pk.TCP_ACK | pk.TCP_PSH, payload=payload,
                         src_mac=me.mac, dst_mac=peer.mac)
        self.sim.send_from(self.src, p)
        deadline_index = index
        self.sim._schedule(self.sim.now + self.rto_us, lambda: self._timeout(deadline_index))

    def _timeout(self, index: int) -> None:
        if self.awaiting == index:
            self.retransmissions += 1
            self._emit(index)

    def on_ack(self, ack_value: int) -> None:
        if self.awaiting is None:
            return
        base = _safe_isn(self.src, "paced")
        acked = (ack_value - base - self.packet_size) & 0xFFFFFFFF
        if acked == self.awaiting:
            self.awaiting = None
            self.delivered_packets += 1
            self.next_index += 1
            self._send_next()


class Simulation:
    """One experiment: topology + workload + gateway configuration."""

    def __init__(
        self,
        topology: topo_mod.Topology,
        workload: Optional[WorkloadSpec] = None,
        engine_config: Optional[EngineConfig] = None,
        seed: int = 0,
        covert: bool = True,
        capture_nodes: Tuple[str, ...] = (),
    ):
        self.topology = topology
        self.workload = workload or WorkloadSpec()
        self.workload.validate()
        self.seed = seed
        self.covert = covert
        self.now = 0
        self._heap: List[Tuple[int, int, Callable[[], None]]] = []
        self._serial = 0

        self.node_stats: Dict[str, NodeStats] = {n: NodeStats() for n in topology.nodes}
        self.monitor_stats: Dict[str, MonitorStats] = {}
        self.sent_log: Dict[str, List[int]] = {n: [] for n in topology.nodes}
        self.secret_deliveries: List[Tuple[int, int]] = []
        self.secret_delivery_digests: List[bytes] = []
        self.desync_count = 0
        self.unroutable = 0
        self.captures: Dict[str, trace_mod.TraceFile] = {
            n: trace_mod.TraceFile(records=[]) for n in capture_nodes
        }

        self._ip_to_node: Dict[int, str] = {}
        for node in topology.nodes.values():
            if node.ip is not None:
                self._ip_to_node[pk.str_to_ip(node.ip)] = node.name
        self._next_hop = self._build_routes()
        self._pipes: Dict[Tuple[str, str], _Pipe] = {}
        for link in topology.links:
            self._pipes[(link.a, link.b)] = _Pipe(link.a, link.b, link.capacity, link.delay_us)
            self._pipes[(link.b, link.a)] = _Pipe(link.b, link.a, link.capacity, link.delay_us)

        base_config = engine_config or EngineConfig()
        self.gateways: Dict[str, CovertGateway] = {}
        self._gateway_side: Dict[str, str] = {}
        self._secret_registry: Dict[str, Set[int]] = {}
        self._phys_nat: Dict[str, Dict[Tuple[int, int], Tuple[int, int, str]]] = {}
        self._phys_nat_next: Dict[str, int] = {}
        for a, b in topology.gateway_pairs():
            for gw, peer in ((a, b), (b, a)):
                node = topology.nodes[gw]
                cfg = EngineConfig(
                    enabled_handlers=base_config.enabled_handlers,
                    cost_overrides=dict(base_config.cost_overrides),
                    encryption=base_config.encryption,
                    augmented_allowed=base_config.augmented_allowed,
                    preserve_icmp_timestamp=base_config.preserve_icmp_timestamp,
                    seed=seed,
                    chunk_size=base_config.chunk_size,
                    augment_probability=base_config.augment_probability,
                )
                engine = CovertGateway(gw, peer, cfg, local_mac=pk.str_to_mac(node.mac))
                self.gateways[gw] = engine
                self._gateway_side[gw] = self._toward(gw, peer)
                self._secret_registry[gw] = {
                    pk.str_to_ip(h.ip)
                    for h in topology.nodes.values()
                    if h.secret and self._closer_to(h.name, peer, gw)
                }
                self._phys_nat[gw] = {}
                self._phys_nat_next[gw] = 61000
        for node in topology.nodes.values():
            if node.kind == topo_mod.KIND_MONITOR:
                self.monitor_stats[node.name] = MonitorStats()
        self._nat_flows: Dict[str, Set[tuple]] = {n: set() for n in self.monitor_stats}
        self._nat_pings: Dict[str, Set[tuple]] = {n: set() for n in self.monitor_stats}

        self.clients: Dict[str, _WorkloadClient] = {}
        self.transfers: List[object] = []
        self._paced_by_src: Dict[str, _PacedTransfer] = {}
        self._build_clients()
        if self.covert and base_config.encryption:
            for engine in self.gateways.values():
                engine.start_key_exchange()

    # -- construction helpers ------------------------------------------------

    def _build_routes(self) -> Dict[str, Dict[str, str]]:
        tables: Dict[str, Dict[str, str]] = {}
        names = list(self.topology.nodes)
        for origin in names:
            parent: Dict[str, Optional[str]] = {origin: None}
            frontier = [origin]
            while frontier:
                nxt = []
                for name in frontier:
                    for n in sorted(self.topology.neighbors(name)):
                        if n not in parent:
                            parent[n] = name
                            nxt.append(n)
                frontier = nxt
            table: Dict[str, str] = {}
            for dest in names:
                if dest == origin or dest not in parent:
                    continue
                step = dest
                while parent[step] != origin:
                    step = parent[step]
                table[dest] = step
            tables[origin] = table
        return tables

    def _toward(self, origin: str, dest: str) -> str:
        try:
            return self._next_hop[origin][dest]
        except KeyError:
            raise SimError("no path from %r to %r" % (origin, dest)) from None

    def _closer_to(self, node: str, a: str, b: str) -> bool:
        da = self.topology.hop_count(node, a)
        db = self.topology.hop_count(node, b)
        return da is not None and (db is None or da < db)

    def _build_clients(self) -> None:
        pairs = self.topology.gateway_pairs()
        for node in sorted(self.topology.nodes.values(), key=lambda n: n.name):
            if not node.workload:
                continue
            target = self._cross_target(node.name, pairs)
            if target is None:
                continue
            rng = _child_rng(self.seed, "workload:%s" % node.name)
            client = _WorkloadClient(self, node.name, target, self.workload, rng)
            self.clients[node.name] = client
            offset = len(self.clients) * 937
            client.start(offset)

    def _cross_target(self, host: str, pairs) -> Optional[str]:
        for a, b in pairs:
            near, far = (a, b) if self._closer_to(host, a, b) else (b, a)
            options = sorted(
                n.name
                for n in self.topology.nodes.values()
                if n.kind == topo_mod.KIND_HOST and not n.secret and n.name != host
                and self._closer_to(n.name, far, near)
            )
            if options:
                return options[0]
        return None

    # -- public API ----------------------------------------------------------

    def add_bulk_transfer(self, src: str, dst: str, payload_octets: int, packet_size: int = 512, start_us: int = 0) -> _BulkTransfer:
        transfer = _BulkTransfer(self, src, dst, payload_octets, packet_size, start_us)
        self.transfers.append(transfer)
        self._schedule(start_us, transfer.start)
        return transfer

    def add_paced_transfer(self, src: str, dst: str, packets: int, packet_size: int = 256, rto_us: int = 400_000, start_us: int = 0) -> _PacedTransfer:
        transfer = _PacedTransfer(self, src, dst, packets, packet_size, rto_us, start_us)
        self.transfers.append(transfer)
        self._paced_by_src[src] = transfer
        self._schedule(start_us, transfer.start)
        return transfer

    def _schedule(self, t: int, fn: Callable[[], None]) -> None:
        self._serial += 1
        heapq.heappush(self._heap, (t, self._serial, fn))

    def run(self, duration_us: int) -> None:
        horizon = self.now + duration_us
        while self._heap and self._heap[0][0] <= horizon:
            t, _, fn = heapq.heappop(self._heap)
            self.now = t
            fn()
        self.now = horizon

    def run_until(self, predicate: Callable[[], bool], max_us: int, step_us: int = 100_000) -> None:
        """Advance in steps until ``predicate`` holds or ``max_us`` passes."""
        while self.now < max_us and not predicate():
            self.run(min(step_us, max_us - self.now))

    def sent_series(self, node: str, interval_us: int, duration_us: Optional[int] = None) -> List[int]:
        """Packets sent by ``node`` per interval over the run."""
        horizon = duration_us if duration_us is not None else self.now
        buckets = [0] * max(1, -(-horizon // interval_us))
        for t in self.sent_log[node]:
            if t < horizon:
                buckets[t // interval_us] += 1
        return buckets

    def gateway(self, name: str) -> CovertGateway:
        return self.gateways[name]

    # -- packet movement -----------------------------------------------------

    def send_from(self, node: str, p: pk.ParsedPacket) -> None:
        """Originate ``p`` at ``node`` and route it one hop."""
        self.node_stats[node].sent += 1
        self.sent_log[node].append(self.now)
        self._route(node, p)

    def _route(self, node: str, p: pk.ParsedPacket) -> None:
        if p.ipv4 is None:
            self.unroutable += 1
            return
        dest = self._ip_to_node.get(p.ipv4.dst_ip)
        if dest is None or dest == node:
            self.unroutable += 1
            self.node_stats[node].dropped += 1
            return
        hop = self._next_hop[node].get(dest)
        if hop is None:
            self.unroutable += 1
            self.node_stats[node].dropped += 1
            return
        pipe = self._pipes[(node, hop)]
        arrival = pipe.transit(self.now, p.wire_len)
        self._schedule(arrival, lambda: self._deliver(hop, p, node))

    def _capture(self, node: str, p: pk.ParsedPacket) -> None:
        tf = self.captures.get(node)
        if tf is not None:
            tf.records.append(pk.RawPacket(pk.serialize_packet(p), capture_time_us=self.now))

    def _deliver(self, node: str, p: pk.ParsedPacket, came_from: str) -> None:
        self.node_stats[node].received += 1
        self._capture(node, p)
        kind = self.topology.nodes[node].kind
        if kind == topo_mod.KIND_HOST:
            self._host_receive(node, p)
        elif kind == topo_mod.KIND_ROUTER:
            self.node_stats[node].forwarded += 1
            self._route(node, p)
        elif kind == topo_mod.KIND_MONITOR:
            self._monitor_receive(node, p, came_from)
        elif kind == topo_mod.KIND_CGATEWAY:
            self._gateway_receive(node, p, came_from)

    # -- hosts -----------------------------------------------------------------

    def _host_receive(self, node: str, p: pk.ParsedPacket) -> None:
        me = self.topology.nodes[node]
        my_ip = pk.str_to_ip(me.ip) if me.ip else None
        if p.ipv4 is None or p.ipv4.dst_ip != my_ip:
            self.node_stats[node].dropped += 1
            return
        if p.tcp is not None and p.tcp.dst_port == SECRET_PORT and p.app_payload:
            for transfer in self.transfers:
                if isinstance(transfer, _BulkTransfer) and transfer.dst == node:
                    transfer.delivered_octets += len(p.app_payload)
                    transfer.delivered_packets += 1
                    transfer.delivered_parts.append(p.app_payload)
                    transfer.finished_us = self.now
        reply = self._respond(node, me, p)
        if reply is not None:
            self.send_from(node, reply)

    def _respond(self, node: str, me, p: pk.ParsedPacket) -> Optional[pk.ParsedPacket]:
        """Stateless service behavior: the reply is a pure function of
        the request, so reruns with one seed are bit-identical."""
        src_name = self._ip_to_node.get(p.ipv4.src_ip)
        src_def = self.topology.nodes.get(src_name) if src_name else None
        dst_mac = src_def.mac if src_def is not None else pk.mac_to_str(p.link.src_mac)
        src_ip = pk.ip_to_str(p.ipv4.dst_ip)
        dst_ip = pk.ip_to_str(p.ipv4.src_ip)
        if p.icmp is not None and p.icmp.icmp_type == pk.ICMP_ECHO_REQUEST:
            return pk.build_icmp_echo(
                src_ip, dst_ip, icmp_type=pk.ICMP_ECHO_REPLY,
                identifier=p.icmp.identifier, sequence=p.icmp.sequence,
                payload=p.icmp.payload, src_mac=me.mac, dst_mac=dst_mac,
            )
        if p.tcp is not None:
            flags = p.tcp.flags
            if flags & pk.TCP_SYN and not flags & pk.TCP_ACK:
                isn = _safe_isn(node, p.ipv4.src_ip, p.tcp.src_port, p.tcp.seq)
                return pk.build_tcp(
                    src_ip, dst_ip, p.tcp.dst_port, p.tcp.src_port,
                    seq=isn, ack=(p.tcp.seq + 1) & 0xFFFFFFFF,
                    flags=pk.TCP_SYN | pk.TCP_ACK, src_mac=me.mac, dst_mac=dst_mac,
                )
            if flags & pk.TCP_SYN and flags & pk.TCP_ACK:
                return pk.build_tcp(
                    src_ip, dst_ip, p.tcp.dst_port, p.tcp.src_port,
                    seq=p.tcp.ack, ack=(p.tcp.seq + 1) & 0xFFFFFFFF,
                    flags=pk.TCP_ACK, src_mac=me.mac, dst_mac=dst_mac,
                )
            if p.app_payload and p.tcp.dst_port == SECRET_PORT:
                ack_value = (p.tcp.seq + len(p.app_payload)) & 0xFFFFFFFF
                return pk.build_tcp(
                    src_ip, dst_ip, p.tcp.dst_port, p.tcp.src_port,
                    seq=p.tcp.ack, ack=ack_value, flags=pk.TCP_ACK,
                    src_mac=me.mac, dst_mac=dst_mac,
                )
            if p.app_payload and p.tcp.dst_port in SERVICE_PORTS.values():
                size = 100 + (p.tcp.seq % 400)
                body = hashlib.sha256(p.app_payload[:32] + p.tcp.seq.to_bytes(4, "big")).digest()
                payload = (body * (size // len(body) + 1))[:size]
                return pk.build_tcp(
                    src_ip, dst_ip, p.tcp.dst_port, p.tcp.src_port,
                    seq=p.tcp.ack, ack=(p.tcp.seq + len(p.app_payload)) & 0xFFFFFFFF,
                    flags=pk.TCP_ACK | pk.TCP_PSH, payload=payload,
                    src_mac=me.mac, dst_mac=dst_mac,
                )
            if flags & pk.TCP_ACK and not p.app_payload and p.tcp.src_port == SECRET_PORT:
                transfer = self._paced_by_src.get(node)
                if transfer is not None:
                    transfer.on_ack(p.tcp.ack)
                return None
            return None
        if p.udp is not None and p.udp.dst_port == UDP_SERVICE_PORT:
            body = hashlib.sha256(bytes(p.app_payload[:16]) + b"udp").digest()
            return pk.build_udp(
                src_ip, dst_ip, p.udp.dst_port, p.udp.src_port,
                payload=body + body[:28], src_mac=me.mac, dst_mac=dst_mac,
            )
        return None

    # -- monitors ----------------------------------------------------------------

    def _monitor_receive(self, node: str, p: pk.ParsedPacket, came_from: str) -> None:
        stats = self.monitor_stats[node]
        stats.seen += 1
        spec = self.topology.nodes[node]
        if p.ipv4 is not None:
            stats.addresses.add((p.ipv4.src_ip, p.ipv4.dst_ip))
            if not pk.validate_ipv4_checksum(p):
                stats.checksum_anomalies += 1
        verdict = None
        for index, rule in enumerate(r for r in self.topology.rules if r.node == node):
            if self._rule_matches(rule, p):
                stats.rule_hits[index] = stats.rule_hits.get(index, 0) + 1
                if rule.action == "log":
                    stats.log_hits += 1
                    continue
                verdict = rule.action
                break
        if verdict is None:
            verdict = spec.default_action
            if verdict == "drop":
                stats.default_drops += 1
                self.node_stats[node].dropped += 1
                return
        if verdict == "drop":
            stats.rule_drops += 1
            self.node_stats[node].dropped += 1
            return
        if spec.nat and not self._nat_permits(node, spec, p, came_from):
            stats.nat_drops += 1
            self.node_stats[node].dropped += 1
            return
        self.node_stats[node].forwarded += 1
        self._route(node, p)

    def _rule_matches(self, rule: topo_mod.RuleDef, p: pk.ParsedPacket) -> bool:
        if p.ipv4 is None:
            return False
        if rule.proto != "any":
            proto = {"tcp": pk.PROTO_TCP, "udp": pk.PROTO_UDP, "icmp": pk.PROTO_ICMP}[rule.proto]
            if p.ipv4.protocol != proto:
                return False
        if rule.src != "any" and p.ipv4.src_ip != pk.str_to_ip(rule.src):
            return False
        if rule.dst != "any" and p.ipv4.dst_ip != pk.str_to_ip(rule.dst):
            return False
        if rule.dst_port is not None:
            port = None
            if p.tcp is not None:
                port = p.tcp.dst_port
            elif p.udp is not None:
                port = p.udp.dst_port
            if port != rule.dst_port:
                return False
        return True

    def _nat_permits(self, node: str, spec, p: pk.ParsedPacket, came_from: str) -> bool:
        """Flow-tracking address translation: outbound traffic opens a
        mapping, unsolicited inbound traffic is dropped."""
        outbound = came_from == spec.nat_inside
        key = pk.flow_key(p)
        if outbound:
            if key is not None:
                self._nat_flows[node].add(key)
            elif p.icmp is not None and p.icmp.icmp_type == pk.ICMP_ECHO_REQUEST:
                self._nat_pings[node].add((p.ipv4.src_ip, p.ipv4.dst_ip, p.icmp.identifier))
            return True
        if key is not None:
            return pk.reverse_flow_key(key) in self._nat_flows[node]
        if p.icmp is not None and p.icmp.icmp_type == pk.ICMP_ECHO_REPLY:
            return (p.ipv4.dst_ip, p.ipv4.src_ip, p.icmp.identifier) in self._nat_pings[node]
        if p.icmp is not None and p.icmp.icmp_type == pk.ICMP_ECHO_REQUEST:
            return False
        return False

    # -- covert gateways ----------------------------------------------------------

    def _gateway_receive(self, node: str, p: pk.ParsedPacket, came_from: str) -> None:
        engine = self.gateways.get(node)
        if engine is None or not self.covert:
            self.node_stats[node].forwarded += 1
            if engine is not None:
                p = engine.adjust_flow(p)
            self._route(node, p)
            return
        outside = self._gateway_side[node]
        if came_from == outside:
            self._gateway_from_peer(node, engine, p)
        else:
            self._gateway_toward_peer(node, engine, p)

    def _gateway_from_peer(self, node: str, engine: CovertGateway, p: pk.ParsedPacket) -> None:
        try:
            forwarded, secrets, _ = engine.extract(p)
        except DesyncError as exc:
            self.desync_count += 1
            forwarded, secrets = exc.forwarded, []
        forwarded = engine.adjust_flow(forwarded)
        for blob in secrets:
            self._deliver_secret(node, blob)
        me = self.topology.nodes[node]
        if me.nat and forwarded.ipv4 is not None and me.ip and forwarded.ipv4.dst_ip == pk.str_to_ip(me.ip):
            unmapped = self._phys_nat_in(node, forwarded)
            if unmapped is not None:
                self.node_stats[node].forwarded += 1
                self._route(node, unmapped)
            return
        self.node_stats[node].forwarded += 1
        self._route(node, forwarded)

    def _gateway_toward_peer(self, node: str, engine: CovertGateway, p: pk.ParsedPacket) -> None:
        registry = self._secret_registry[node]
        me = self.topology.nodes[node]
        if p.ipv4 is not None and p.ipv4.dst_ip in registry:
            engine.enqueue_secret(pk.serialize_packet(p))
            return
        src_is_secret = (
            p.ipv4 is not None
            and self.topology.nodes.get(self._ip_to_node.get(p.ipv4.src_ip, ""), None) is not None
            and self.topology.nodes[self._ip_to_node[p.ipv4.src_ip]].secret
        )
        if me.nat and src_is_secret:
            p = self._phys_nat_out(node, me, p)
        p = engine.adjust_flow(p)
        # Only traffic actually crossing to the peer side carries the
        # stream; anything staying local would never reach extraction.
        dest = self._ip_to_node.get(p.ipv4.dst_ip) if p.ipv4 is not None else None
        via = self._next_hop[node].get(dest) if dest is not None else None
        if via == self._gateway_side[node]:
            p, _ = engine.fuse(p)
        self.node_stats[node].forwarded += 1
        self._route(node, p)

    def _deliver_secret(self, node: str, blob: bytes) -> None:
        self.secret_deliveries.append((self.now, len(blob)))
        self.secret_delivery_digests.append(hashlib.sha256(blob).digest())
        try:
            inner = pk.parse_packet(blob)
        except pk.PacketError:
            return
        if inner.ipv4 is None:
            return
        self._route(node, inner)

    # physical address translation at a gateway: secret flows leave with
    # the gateway's own address and a remapped source port.

    def _phys_nat_out(self, node: str, me, p: pk.ParsedPacket) -> pk.ParsedPacket:
        table = self._phys_nat[node]
        my_ip = pk.str_to_ip(me.ip)
        if p.tcp is not None or p.udp is not None:
            proto = p.ipv4.protocol
            sport = p.tcp.src_port if p.tcp is not None else p.udp.src_port
            mapped = None
            for (mproto, mport), (oip, oport, _) in table.items():
                if mproto == proto and oip == p.ipv4.src_ip and oport == sport:
                    mapped = mport
                    break
            if mapped is None:
                mapped = self._phys_nat_next[node]
                while (proto, mapped) in table:
                    mapped += 1
                self._phys_nat_next[node] = mapped + 1
                table[(proto, mapped)] = (p.ipv4.src_ip, sport, self._ip_to_node.get(p.ipv4.src_ip, ""))
            transport = replace(p.tcp, src_port=mapped) if p.tcp is not None else replace(p.udp, src_port=mapped)
            updated = replace(
                p,
                link=replace(p.link, src_mac=pk.str_to_mac(me.mac)),
                ipv4=replace(p.ipv4, src_ip=my_ip),
                transport=transport,
            )
            return pk.fix_checksums(updated)
        if p.icmp is not None:
            key = (pk.PROTO_ICMP, p.icmp.identifier)
            if key not in table:
                table[key] = (p.ipv4.src_ip, p.icmp.identifier, self._ip_to_node.get(p.ipv4.src_ip, ""))
            updated = replace(
                p,
                link=replace(p.link, src_mac=pk.str_to_mac(me.mac)),
                ipv4=replace(p.ipv4, src_ip=my_ip),
            )
            return pk.fix_checksums(updated)
        return p

    def _phys_nat_in(self, node: str, p: pk.ParsedPacket) -> Optional[pk.ParsedPacket]:
        table = self._phys_nat[node]
        if p.tcp is not None or p.udp is not None:
            proto = p.ipv4.protocol
            dport = p.tcp.dst_port if p.tcp is not None else p.udp.dst_port
            entry = table.get((proto, dport))
            if entry is None:
                return None
            oip, oport, _ = entry
            transport = replace(p.tcp, dst_port=oport) if p.tcp is not None else replace(p.udp, dst_port=oport)
            host = self.topology.nodes.get(self._ip_to_node.get(oip, ""), None)
            updated = replace(
                p,
                link=replace(p.link, dst_mac=pk.str_to_mac(host.mac) if host else p.link.dst_mac),
                ipv4=replace(p.ipv4, dst_ip=oip),
                transport=transport,
            )
            return pk.fix_checksums(updated)
        if p.icmp is not None:
            entry = table.get((pk.PROTO_ICMP, p.icmp.identifier))
            if entry is None:
                return None
            oip, _, _ = entry
            updated = replace(p, ipv4=replace(p.ipv4, dst_ip=oip))
            return pk.fix_checksums(updated)
        return None
