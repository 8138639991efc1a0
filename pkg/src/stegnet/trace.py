"""Classic pcap trace reading and writing.

Covers the original little-endian capture format only: magic
0xa1b2c3d4, version 2.4, microsecond timestamps.  Synthetic records are
always full captures (incl_len == orig_len), so write(read(x)) == x
holds bit for bit for anything this module produced.
"""

from __future__ import annotations

import io
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

from .packet import RawPacket, build_icmp_echo, build_tcp, build_udp, serialize_packet

PCAP_MAGIC = 0xA1B2C3D4
PCAP_VERSION = (2, 4)
PCAP_SNAPLEN = 65535
LINKTYPE_ETHERNET = 1

_GLOBAL = struct.Struct("<IHHiIII")
_RECORD = struct.Struct("<IIII")


class TraceError(Exception):
    """Base for capture file problems."""


class BadMagic(TraceError):
    """File does not start with the classic little-endian pcap magic."""


class TruncatedRecord(TraceError):
    """A record header or body ends before its declared length."""


@dataclass
class TraceFile:
    records: List[RawPacket] = field(default_factory=list)
    link_type: int = LINKTYPE_ETHERNET


Source = Union[str, Path, bytes, io.BufferedIOBase]


def _read_all(source: Source) -> bytes:
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    return source.read()


def read_trace(source: Source) -> TraceFile:
    data = _read_all(source)
    if len(data) < _GLOBAL.size:
        raise BadMagic("capture shorter than a pcap global header")
    magic, vmaj, vmin, _zone, _sigfigs, _snaplen, network = _GLOBAL.unpack_from(data, 0)
    if magic != PCAP_MAGIC:
        raise BadMagic("unsupported capture magic 0x%08x" % magic)
    if (vmaj, vmin) != PCAP_VERSION:
        raise TraceError("unsupported pcap version %d.%d" % (vmaj, vmin))
    trace = TraceFile(link_type=network)
    offset = _GLOBAL.size
    while offset < len(data):
        if offset + _RECORD.size > len(data):
            raise TruncatedRecord("record header truncated at offset %d" % offset)
        ts_sec, ts_usec, incl_len, orig_len = _RECORD.unpack_from(data, offset)
        offset += _RECORD.size
        if offset + incl_len > len(data):
            raise TruncatedRecord("record body truncated at offset %d" % offset)
        if incl_len != orig_len:
            raise TraceError("snaplen-truncated record (incl %d != orig %d)" % (incl_len, orig_len))
        trace.records.append(RawPacket(data=data[offset : offset + incl_len], capture_time_us=ts_sec * 1_000_000 + ts_usec))
        offset += incl_len
    return trace


def write_trace(trace: TraceFile, sink: Union[str, Path, io.BufferedIOBase, None] = None) -> bytes:
    """Serialize ``trace``; optionally write it to a path or file object."""
    out = bytearray(_GLOBAL.pack(PCAP_MAGIC, PCAP_VERSION[0], PCAP_VERSION[1], 0, 0, PCAP_SNAPLEN, trace.link_type))
    for record in trace.records:
        sec, usec = divmod(record.capture_time_us, 1_000_000)
        out += _RECORD.pack(sec, usec, len(record.data), len(record.data))
        out += record.data
    blob = bytes(out)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(blob)
    elif sink is not None:
        sink.write(blob)
    return blob


def synthesize_mixed_trace(count: int, seed: int = 0, *, start_us: int = 0, gap_us: int = 1000) -> TraceFile:
    """Deterministic mixed traffic for demos and tooling tests.

    Roughly two thirds TCP data packets, with UDP, ICMP echo requests
    and a few bare TCP SYNs mixed in.  All frames are well formed with
    valid checksums.
    """
    rng = random.Random(seed)
    trace = TraceFile()
    t = start_us
    for i in range(count):
        kind = rng.random()
        src = "10.1.0.%d" % rng.randint(2, 60)
        dst = "10.2.0.%d" % rng.randint(2, 60)
        if kind < 0.55:
            p = build_tcp(src, dst, rng.randint(1024, 60000), rng.choice([80, 443, 8080]),
                          seq=rng.getrandbits(32), ack=rng.getrandbits(32),
                          payload=rng.randbytes(rng.randint(40, 600)),
                          identification=i & 0xFFFF)
        elif kind < 0.65:
            from .packet import TCP_SYN
            p = build_tcp(src, dst, rng.randint(1024, 60000), 80, flags=TCP_SYN,
                          seq=rng.getrandbits(32), identification=i & 0xFFFF)
        elif kind < 0.82:
            p = build_udp(src, dst, rng.randint(1024, 60000), 53,
                          payload=rng.randbytes(rng.randint(20, 300)),
                          identification=i & 0xFFFF)
        else:
            p = build_icmp_echo(src, dst, identifier=rng.getrandbits(16), sequence=i & 0xFFFF,
                                payload=rng.randbytes(56), identification=i & 0xFFFF)
        trace.records.append(RawPacket(data=serialize_packet(p), capture_time_us=t))
        t += gap_us
    return trace
