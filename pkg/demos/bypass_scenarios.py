"""Run the middlebox scenarios and narrate what the monitor saw.

Each scenario runs the same transfer twice: once directly, once over
the covert channel, against a core monitor configured to stop it.

    python3 demos/bypass_scenarios.py
"""

from stegnet import scenarios as sc


def banner(title):
    print()
    print(title)
    print("-" * len(title))


def main() -> None:
    banner("ip restriction: core drops both secret addresses")
    fw = sc.scenario_firewall_bypass(seed=1)
    f = fw.fields
    print("direct transfer:  %d octets through, %d frames dropped"
          % (f["direct_delivered_octets"], f["direct_blocked_packets"]))
    print("covert transfer:  %d octets through, payload intact: %s"
          % (f["covert_delivered_octets"], f["payload_intact"]))
    print("rule hits on secret addresses: %d, secret address sightings: %d"
          % (f["secret_ip_rule_hits"], f["monitor_secret_address_sightings"]))

    banner("address translation: unsolicited inbound dies at the core")
    nat = sc.scenario_nat_bypass(seed=1)
    f = nat.fields
    print("direct SYN:       established=%s (translator dropped %d)"
          % (f["direct_handshake_established"], f["direct_syn_nat_drops"]))
    print("covert handshake: established=%s (translator dropped %d)"
          % (f["covert_handshake_established"], f["covert_handshake_nat_drops"]))

    banner("segmentation: default-drop core, allowlisted services only")
    seg = sc.scenario_segmentation(seed=1)
    f = seg.fields
    print("direct transfer:  %d octets, %d frames dropped"
          % (f["direct_delivered_octets"], f["direct_blocked_packets"]))
    print("covert transfer:  %d octets across the segment boundary"
          % f["covert_delivered_octets"])

    banner("impersonation: gateway lends its address to site A")
    imp = sc.scenario_impersonation(seed=1)
    f = imp.fields
    print("covert transfer:  %d octets behind %d port translations"
          % (f["covert_delivered_octets"], f["gateway_translations"]))
    print("server still answered %d frames; secret address sightings: %d"
          % (f["server_received_packets"], f["monitor_secret_address_sightings"]))


if __name__ == "__main__":
    main()
