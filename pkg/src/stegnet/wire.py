"""In-band signaling for the covert stream.

Synchronization headers are 3 octets: an 8-bit code and 16 bits of
big-endian data.  They are never encrypted, so the receiving side can
always interpret them without session state.  The handler-switch header
protects itself with a magic octet (0xA5) in the data high byte; other
codes carry plain counts.

Exclusion is signaled out of band relative to the carrier region: the
IPv4 TOS octet is set to 0xE7.  The marker consumes no carrier
capacity, and no handler is allowed to use the TOS octet as a region.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

from . import packet as pk

SYNC_SIZE = 3

CODE_PACKET_START = 0x01
CODE_HANDLER_SWITCH = 0x02
CODE_KEY_EXCHANGE = 0x03
CODE_SESSION_RESET = 0x04
CODE_RECOVERY = 0x05

SYNC_CODES = frozenset((CODE_PACKET_START, CODE_HANDLER_SWITCH, CODE_KEY_EXCHANGE, CODE_SESSION_RESET, CODE_RECOVERY))

SWITCH_MAGIC = 0xA5

# TOS octet value marking a carrier that holds no secret data.
EXCLUDE_TOS = 0xE7

RECOVERY_LEN = 17

FIELD_TCP_ISN = 5


@dataclass(frozen=True)
class SyncHeader:
    code: int
    data: int


def encode_sync(header: SyncHeader) -> bytes:
    if header.code not in SYNC_CODES:
        raise ValueError("unknown sync code 0x%02x" % header.code)
    if not 0 <= header.data <= 0xFFFF:
        raise ValueError("sync data %d out of 16-bit range" % header.data)
    return bytes((header.code, header.data >> 8, header.data & 0xFF))


def decode_sync(octets: bytes) -> Optional[SyncHeader]:
    """Decode 3 octets; None when they cannot be a sync header."""
    if len(octets) < SYNC_SIZE:
        return None
    code = octets[0]
    if code not in SYNC_CODES:
        return None
    data = (octets[1] << 8) | octets[2]
    if code == CODE_HANDLER_SWITCH and octets[1] != SWITCH_MAGIC:
        return None
    return SyncHeader(code, data)


def switch_header(handler_id: int) -> SyncHeader:
    if not 0 <= handler_id <= 0xFF:
        raise ValueError("handler id %d out of 8-bit range" % handler_id)
    return SyncHeader(CODE_HANDLER_SWITCH, (SWITCH_MAGIC << 8) | handler_id)


def switch_target(header: SyncHeader) -> int:
    return header.data & 0xFF


# ---------------------------------------------------------------------------
# Exclusion marker


def mark_excluded(p: pk.ParsedPacket) -> pk.ParsedPacket:
    """Stamp the capacity-free exclusion signature on a carrier.

    The IPv4 header checksum is recomputed so the marked packet stays
    structurally valid in transit.
    """
    if p.ipv4 is None:
        raise pk.UnsupportedProtocol("exclusion marker needs an IPv4 header")
    return pk.fix_ipv4_checksum(replace(p, ipv4=replace(p.ipv4, tos=EXCLUDE_TOS)))


def is_excluded(p: pk.ParsedPacket) -> bool:
    return p.ipv4 is not None and p.ipv4.tos == EXCLUDE_TOS


def clear_exclusion(p: pk.ParsedPacket) -> pk.ParsedPacket:
    """Zero the TOS octet before forwarding; the original value is not
    restored (accepted loss, generators never emit the marker value)."""
    if p.ipv4 is None:
        return p
    return pk.fix_ipv4_checksum(replace(p, ipv4=replace(p.ipv4, tos=0)))


# ---------------------------------------------------------------------------
# Recovery records


class MalformedRecord(Exception):
    """Recovery record bytes of the wrong shape."""


@dataclass(frozen=True)
class RecoveryRecord:
    """Original value of a destructively overwritten field.

    The flow key identifies the rewritten flow; ``field_id`` names the
    handler that did the damage; ``original`` is the pre-write value.
    """

    src_ip: int
    src_port: int
    dst_ip: int
    dst_port: int
    field_id: int
    original: int


def encode_recovery(record: RecoveryRecord) -> bytes:
    out = bytearray()
    out += record.src_ip.to_bytes(4, "big")
    out += record.src_port.to_bytes(2, "big")
    out += record.dst_ip.to_bytes(4, "big")
    out += record.dst_port.to_bytes(2, "big")
    out.append(record.field_id)
    out += record.original.to_bytes(4, "big")
    assert len(out) == RECOVERY_LEN
    return bytes(out)


def decode_recovery(octets: bytes) -> RecoveryRecord:
    if len(octets) != RECOVERY_LEN:
        raise MalformedRecord("recovery record must be %d octets, got %d" % (RECOVERY_LEN, len(octets)))
    return RecoveryRecord(
        src_ip=int.from_bytes(octets[0:4], "big"),
        src_port=int.from_bytes(octets[4:6], "big"),
        dst_ip=int.from_bytes(octets[6:10], "big"),
        dst_port=int.from_bytes(octets[10:12], "big"),
        field_id=octets[12],
        original=int.from_bytes(octets[13:17], "big"),
    )


# ---------------------------------------------------------------------------
# Segment planning


def handler_switch_needed(chosen: int, active: Optional[int], multiplicity: int, active_multiplicity: int) -> bool:
    """Whether this carrier must announce its handler in-band.

    A switch header is inserted exactly when the selected handler
    differs from the active one and either this carrier matches more
    than one handler or the carrier that established the active handler
    did.  Unambiguous transitions stay silent: the peer re-derives the
    same selection on its own.
    """
    if active is None or chosen == active:
        return False
    return multiplicity > 1 or active_multiplicity > 1


class SegmentCursor:
    """Per-direction planning state shared by the sender and tests.

    Tracks the active handler and whether the carrier that established
    it was ambiguous (matched by more than one handler).  Excluded
    carriers leave the state untouched.
    """

    def __init__(self, active_handler: Optional[int] = None, active_multiplicity: int = 1):
        self.active_handler = active_handler
        self.active_multiplicity = active_multiplicity

    def place(
        self,
        handler_id: int,
        capacity: int,
        multiplicity: int,
        remaining: int,
        opening: Optional[SyncHeader] = None,
    ) -> Optional[Tuple[Optional[SyncHeader], int]]:
        """Plan one carrier. Returns (sync header or None, data octets),
        or None when the carrier cannot make progress and must be
        excluded.  A carrier is usable only if its capacity fits the
        required header plus at least one data octet (header-only items
        with nothing left to send just need the header)."""
        if opening is not None:
            header: Optional[SyncHeader] = opening
        elif handler_switch_needed(handler_id, self.active_handler, multiplicity, self.active_multiplicity):
            header = switch_header(handler_id)
        else:
            header = None
        overhead = SYNC_SIZE if header is not None else 0
        if capacity < overhead + min(remaining, 1):
            return None
        data = min(capacity - overhead, remaining)
        established = opening is not None or handler_id != self.active_handler
        if established:
            self.active_multiplicity = multiplicity
        self.active_handler = handler_id
        return header, data


@dataclass(frozen=True)
class SegmentEntry:
    handler_id: Optional[int]
    sync: Optional[SyncHeader]
    data_octets: int
    excluded: bool = False


@dataclass
class SegmentPlan:
    secret_len: int
    entries: List[SegmentEntry] = field(default_factory=list)

    @property
    def total_data(self) -> int:
        return sum(e.data_octets for e in self.entries)

    @property
    def complete(self) -> bool:
        return self.total_data == self.secret_len


def plan_segments(
    secret_len: int,
    carriers: Sequence[Tuple[int, int, int]],
    cursor: Optional[SegmentCursor] = None,
) -> SegmentPlan:
    """Lay one secret packet over an ordered carrier sequence.

    ``carriers`` holds (handler id, capacity, match multiplicity)
    tuples.  The first usable carrier gets a PACKET_START header whose
    data field is the secret packet length; later carriers get a
    handler-switch header exactly when ``handler_switch_needed`` says
    so.  Carriers that cannot fit their required header plus one data
    octet are planned as excluded and consume nothing.
    """
    if secret_len < 1:
        raise ValueError("secret length must be positive")
    if secret_len > 0xFFFF:
        raise ValueError("secret length %d exceeds 16-bit start header field" % secret_len)
    cursor = cursor if cursor is not None else SegmentCursor()
    plan = SegmentPlan(secret_len=secret_len)
    remaining = secret_len
    opened = False
    for handler_id, capacity, multiplicity in carriers:
        if remaining == 0:
            break
        opening = None if opened else SyncHeader(CODE_PACKET_START, secret_len)
        placed = cursor.place(handler_id, capacity, multiplicity, remaining, opening)
        if placed is None:
            plan.entries.append(SegmentEntry(handler_id=handler_id, sync=None, data_octets=0, excluded=True))
            continue
        header, data = placed
        opened = True
        remaining -= data
        plan.entries.append(SegmentEntry(handler_id=handler_id, sync=header, data_octets=data))
    return plan
