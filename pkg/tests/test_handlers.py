import random

import pytest

import stegnet.handlers as hd
import stegnet.packet as pk


def _tcp(payload=b"x" * 32, flags=pk.TCP_ACK):
    return pk.build_tcp("10.0.0.1", "10.0.0.2", 1000, 80, flags=flags, payload=payload)


def _syn():
    return pk.build_tcp("10.0.0.1", "10.0.0.2", 1000, 80, flags=pk.TCP_SYN, seq=0x1234)


def _icmp(size=56):
    return pk.build_icmp_echo("10.0.0.1", "10.0.0.2", payload=bytes(range(size % 251)) + b"\x00" * (size - size % 251))


def _udp():
    return pk.build_udp("10.0.0.1", "10.0.0.2", 53, 5353, payload=b"q" * 30)


def test_builtin_table():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    spec = {hid: reg.get(hid) for hid in reg.ids}
    assert [s.id for s in spec.values()] == [1, 2, 3, 4, 5]
    assert spec[1].carrier_cost == 0.34
    assert spec[2].carrier_cost == 0.10
    assert spec[3].carrier_cost == 0.70
    assert spec[4].carrier_cost == 0.10
    assert spec[5].carrier_cost == 0.70
    assert spec[4].recovery is hd.RecoveryClass.SELF_RECOVERABLE
    assert spec[5].recovery is hd.RecoveryClass.AUGMENTED_CORRECTION
    assert spec[4].manipulation is hd.ManipulationClass.DESTRUCTIVE


def test_default_enabled_set():
    reg = hd.build_registry()
    assert [hid for hid in reg.ids if reg.is_enabled(hid)] == [1, 2, 4]
    # the risky wide channels exist but stay off until asked for
    assert not reg.is_enabled(3)
    assert not reg.is_enabled(5)


def test_match_dispatch():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    assert reg.match(_tcp()) == [1, 3, 4]
    assert reg.match(_syn()) == [3, 4, 5]
    assert reg.match(_icmp()) == [2, 3]
    assert reg.match(_udp()) == [3, 4]


def test_capacities():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    assert reg.get(1).capacity(_tcp()) == 40
    assert reg.get(2).capacity(_icmp(56)) == 56
    assert reg.get(3).capacity(_tcp()) == 2
    assert reg.get(4).capacity(_tcp()) == 2
    assert reg.get(5).capacity(_syn()) == 4


def test_icmp_timestamp_preservation():
    reg = hd.build_registry(enabled=(2,), preserve_icmp_timestamp=True)
    p = _icmp(56)
    spec = reg.get(2)
    assert spec.capacity(p) == 48
    written = spec.writer(p, b"S" * 48)
    assert written.icmp.payload[:8] == p.icmp.payload[:8]
    assert written.icmp.payload[8:] == b"S" * 48


def test_pair_law_prefix_and_exact():
    # the read-back region starts with the written octets and matches
    # exactly when the segment fills the whole region
    reg = hd.build_registry(enabled=(1, 2, 4))
    rng = random.Random(77)
    for hid, carrier in ((1, _tcp()), (2, _icmp()), (4, _udp())):
        spec = reg.get(hid)
        cap = spec.capacity(carrier)
        for _ in range(40):
            size = rng.randint(1, cap)
            segment = rng.randbytes(size)
            got = spec.reader(spec.writer(carrier, segment))
            assert len(got) >= size
            assert got[:size] == segment
        full = rng.randbytes(cap)
        assert spec.reader(spec.writer(carrier, full)) == full


def test_registry_rejects_duplicate_id():
    reg = hd.HandlerRegistry()
    reg.register(hd.make_tcp_options_handler())
    with pytest.raises(hd.DuplicateId):
        reg.register(hd.make_tcp_options_handler())


def test_self_test_catches_broken_reader():
    broken = hd.make_icmp_payload_handler()
    lying_reader = lambda p: p.icmp.payload[1:] + b"\x00"
    bad = hd.HandlerSpec(
        id=99, name="liar", match=broken.match, writer=broken.writer,
        reader=lying_reader, capacity=broken.capacity,
        carrier_cost=0.2, manipulation=broken.manipulation, recovery=broken.recovery,
    )
    with pytest.raises(hd.SelfTestFailed):
        hd.HandlerRegistry().register(bad)


def test_unknown_handler():
    reg = hd.build_registry()
    with pytest.raises(hd.UnknownHandler):
        reg.get(42)
    with pytest.raises(hd.UnknownHandler):
        hd.build_registry(enabled=(1, 42))


def test_cost_override_changes_selection():
    reg = hd.build_registry(enabled=(1, 2), cost_overrides={1: 0.05})
    ctx = hd.SelectionContext(opening=True)
    # tcp_options is normally pricier than icmp_payload; override flips nothing
    # here because the two never match the same packet, but the spec cost must
    # reflect the override.
    assert reg.get(1).carrier_cost == 0.05
    assert reg.get(2).carrier_cost == 0.10
    assert reg.select([1], ctx, _tcp()) == 1


def test_selection_prefers_cheapest():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    # continuing on the checksum field is cheaper (0.10) than options (0.34)
    ctx = hd.SelectionContext(opening=False, active_handler=4)
    assert reg.select([1, 3, 4], ctx, _tcp()) == 4
    # when opening, two-octet fields fall out and options wins
    assert reg.select([1, 3, 4], hd.SelectionContext(opening=True), _tcp()) == 1
    # mid-item away from handler 1 a switch header cannot fit a 2-octet
    # field, so the active wide field keeps the stream
    ctx_active_one = hd.SelectionContext(opening=False, active_handler=1)
    assert reg.select([1, 3, 4], ctx_active_one, _tcp()) == 1


def test_selection_recovery_rank_breaks_cost_tie():
    # icmp_payload and ipv4_checksum share cost 0.10; NO_RECOVERY wins
    reg = hd.build_registry(enabled=(2, 4))
    ctx = hd.SelectionContext(opening=False, active_handler=2)
    chosen = reg.select([2, 4], ctx, _icmp())
    assert chosen == 2


def test_selection_excludes_augmented_without_permission():
    reg = hd.build_registry(enabled=(3, 5))
    syn = _syn()
    # two candidates force a switch header; the 2-octet id field cannot
    # hold one and the ISN field is barred without permission
    ctx = hd.SelectionContext(opening=False, active_handler=1)
    assert reg.select([3, 5], ctx, syn) is None
    ctx_aug = hd.SelectionContext(opening=False, active_handler=1, augmented_allowed=True)
    assert reg.select([3, 5], ctx_aug, syn) == 5
    # a lone unambiguous id field continues an item silently
    assert reg.select([3], ctx, syn) == 3
    # the 4-octet ISN region can even open an item: header plus one octet
    assert reg.select([5], hd.SelectionContext(opening=True, augmented_allowed=True), syn) == 5


def test_selection_none_when_nothing_can_progress():
    reg = hd.build_registry(enabled=(3, 4, 5))
    ctx = hd.SelectionContext(opening=True)
    # every candidate region is 2 octets; an opening header needs 3 + 1
    assert reg.select([3, 4], ctx, _tcp()) is None


def test_selection_switch_need_counts_against_capacity():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    # mid-item, switching into a 2-octet field would need a 3-octet header
    ctx = hd.SelectionContext(opening=False, active_handler=1, active_multiplicity=2)
    assert reg.select([4], ctx, _udp()) is None
    # same field continuing silently is fine
    ctx2 = hd.SelectionContext(opening=False, active_handler=4, active_multiplicity=1)
    assert reg.select([4], ctx2, _udp()) == 4


def test_selection_deterministic():
    reg = hd.build_registry(enabled=(1, 2, 3, 4, 5))
    rng = random.Random(11)
    carriers = [_tcp(), _syn(), _icmp(), _udp()]
    for _ in range(200):
        p = rng.choice(carriers)
        candidates = reg.match(p)
        ctx = hd.SelectionContext(
            opening=rng.random() < 0.5,
            active_handler=rng.choice((None, 1, 2, 4)),
            active_multiplicity=rng.choice((1, 2)),
            augmented_allowed=rng.random() < 0.5,
        )
        first = reg.select(candidates, ctx, p)
        again = reg.select(list(candidates), hd.SelectionContext(**vars(ctx)), p)
        assert first == again


def test_sync_reserved_cost_rule():
    cheap = hd.make_icmp_payload_handler(handler_id=77)
    reserved = hd.HandlerSpec(
        id=77, name="reserved", match=cheap.match, writer=cheap.writer,
        reader=cheap.reader, capacity=cheap.capacity, carrier_cost=0.2,
        manipulation=cheap.manipulation, recovery=cheap.recovery, sync_reserved=True,
    )
    with pytest.raises(hd.RegistryError):
        hd.HandlerRegistry().register(reserved)
