"""Hide a message in a packet capture, then get it back.

Synthesizes a small mixed-traffic pcap, rides a text payload through
the header fields of its TCP and ICMP packets, and recovers it from
the fused capture alone.  Everything happens offline on files.

    python3 demos/fuse_a_capture.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

from stegnet import packet as pk
from stegnet import trace as tr
from stegnet.cli import main as stegnet

MESSAGE = (b"The carrier knows nothing of its cargo. "
           b"Forty octets of options here, an echo payload there, "
           b"and the message crosses in plain sight.")


def run(workdir: Path) -> None:
    raw = workdir / "mixed.pcap"
    fused = workdir / "fused.pcap"
    payload_in = workdir / "message.bin"
    payload_out = workdir / "recovered.bin"
    repaired = workdir / "repaired.pcap"

    print("== synthesize a 300-packet mixed capture")
    tr.write_trace(tr.synthesize_mixed_trace(300, seed=7), str(raw))
    payload_in.write_bytes(MESSAGE)

    print("== fuse %d payload octets into the capture" % len(MESSAGE))
    rc = stegnet(["fuse-trace", "--in", str(raw), "--out", str(fused),
                  "--payload-file", str(payload_in)])
    assert rc == 0, "fuse failed"

    before = {r.capture_time_us: r.data for r in tr.read_trace(str(raw)).records}
    changed = sum(1 for r in tr.read_trace(str(fused)).records
                  if before[r.capture_time_us] != r.data)
    print("   %d of 300 frames differ from the original capture" % changed)

    print("== extract from the fused capture alone")
    rc = stegnet(["extract-trace", "--in", str(fused),
                  "--out", str(payload_out), "--trace-out", str(repaired)])
    assert rc == 0, "extract failed"

    got = payload_out.read_bytes()
    print("== round trip %s" % ("OK" if got == MESSAGE else "FAILED"))
    print("   %r" % got.decode())

    bad = sum(1 for r in tr.read_trace(str(repaired)).records
              if not pk.validate_checksums(pk.parse_packet(r.data)))
    print("   repaired trace: %d checksum failures" % bad)


if __name__ == "__main__":
    if len(sys.argv) > 1:
        run(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as d:
            run(Path(d))
