#!/usr/bin/env python3
"""Generates the bundled single-phase 37-bus feeder and profile files.

Topology and segment lengths follow the IEEE 37-bus test feeder; line
impedances use the positive-sequence equivalents of the four underground
cable configurations, scaled by IMPEDANCE_SCALE to produce a voltage-stressed
single-phase study case. Loads and panel sizes are artifact inputs.
"""
import json
import sys
from collections import deque

# (node_a, node_b, length_ft, config)
SEGMENTS = [
    (799, 701, 1850, 721),
    (701, 702, 960, 722),
    (702, 705, 400, 724),
    (702, 713, 360, 723),
    (702, 703, 1320, 722),
    (703, 727, 240, 724),
    (703, 730, 600, 723),
    (704, 714, 80, 724),
    (704, 720, 800, 723),
    (705, 742, 320, 724),
    (705, 712, 240, 724),
    (706, 725, 280, 724),
    (707, 724, 760, 724),
    (707, 722, 120, 724),
    (708, 733, 320, 723),
    (708, 732, 320, 724),
    (709, 731, 600, 723),
    (709, 708, 320, 723),
    (710, 735, 200, 724),
    (710, 736, 1280, 724),
    (711, 741, 400, 723),
    (711, 740, 200, 724),
    (713, 704, 520, 723),
    (714, 718, 520, 724),
    (720, 707, 920, 724),
    (720, 706, 600, 723),
    (727, 744, 280, 723),
    (730, 709, 200, 723),
    (733, 734, 560, 723),
    (734, 737, 640, 723),
    (734, 710, 520, 724),
    (737, 738, 400, 723),
    (738, 711, 400, 723),
    (744, 728, 200, 724),
    (744, 729, 280, 724),
]
# Positive-sequence impedance per configuration, ohm/mile.
CONFIG_Z = {
    721: (0.2926, 0.1973),
    722: (0.4751, 0.2973),
    723: (1.2936, 0.6713),
    724: (2.0952, 0.7758),
}
# Service transformer to node 775, already in p.u. on the system base.
XFM = (709, 775, 0.04, 0.12)

BASE_MVA = 10.0
BASE_KV = 4.8
IMPEDANCE_SCALE = float(sys.argv[1]) if len(sys.argv) > 1 else 3.0
LOAD_SCALE = float(sys.argv[2]) if len(sys.argv) > 2 else 1.5
SMAX_FACTOR = float(sys.argv[3]) if len(sys.argv) > 3 else 1.5

# Benchmark (peak) loads in kW before LOAD_SCALE, keyed by renumbered bus id.
LOADS_KW = {
    2: 55, 3: 40, 4: 35, 5: 60, 6: 30, 7: 70, 8: 45, 9: 35, 10: 50,
    11: 60, 12: 110, 13: 40, 14: 55, 15: 55, 16: 85, 17: 35, 18: 45,
    19: 40, 20: 95, 21: 75, 22: 90, 23: 65, 24: 120, 25: 100, 26: 45,
    27: 50, 28: 40, 29: 35, 30: 30, 31: 40, 32: 35, 33: 45, 34: 55,
    35: 40, 36: 30,
}
SOLAR_BUSES = {7, 11, 12, 15, 16, 20, 21, 22, 24, 25, 26, 27, 28, 30, 31, 34}
CONTROLLED = {12, 20, 22, 24, 25}
SOLAR_MULTIPLE = 2.0  # panel peak vs load benchmark


def bfs_numbering():
    adj = {}
    for a, b, _, _ in SEGMENTS + [(XFM[0], XFM[1], 0, 0)]:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    order = {799: 0}
    queue = deque([799])
    while queue:
        node = queue.popleft()
        for nxt in adj[node]:
            if nxt not in order:
                order[nxt] = len(order)
                queue.append(nxt)
    return order


def main():
    number = bfs_numbering()
    n = len(number) - 1
    z_base = BASE_KV**2 / BASE_MVA  # ohms

    lines = []
    for a, b, length, cfg in SEGMENTS:
        r_mi, x_mi = CONFIG_Z[cfg]
        miles = length / 5280.0
        lines.append({
            "from": number[a],
            "to": number[b],
            "r_pu": round(IMPEDANCE_SCALE * r_mi * miles / z_base, 8),
            "x_pu": round(IMPEDANCE_SCALE * x_mi * miles / z_base, 8),
        })
    lines.append({
        "from": number[XFM[0]],
        "to": number[XFM[1]],
        "r_pu": XFM[2],
        "x_pu": XFM[3],
    })
    lines.sort(key=lambda l: (l["from"], l["to"]))

    buses = []
    profiles = []
    for bus_id in range(n + 1):
        load_kw = LOADS_KW.get(bus_id, 0) * LOAD_SCALE
        load_pu = load_kw / (BASE_MVA * 1000.0)
        solar_pu = SOLAR_MULTIPLE * load_pu if bus_id in SOLAR_BUSES else 0.0
        bus = {
            "id": bus_id,
            "v_min": 0.97,
            "v_max": 1.03,
            "has_load": load_kw > 0,
            "has_solar": bus_id in SOLAR_BUSES,
            "has_inverter_control": bus_id in CONTROLLED,
        }
        if bus_id in CONTROLLED:
            bus["s_max"] = round(SMAX_FACTOR * solar_pu, 8)
        buses.append(bus)
        if bus_id > 0:
            profiles.append({
                "id": bus_id,
                "peak_load_pu": round(load_pu, 8),
                "peak_solar_pu": round(solar_pu, 8),
            })

    feeder = {
        "base_mva": BASE_MVA,
        "base_kv": BASE_KV,
        "buses": buses,
        "lines": lines,
    }
    with open("crates/voltpolicy/data/feeder37.json", "w") as f:
        json.dump(feeder, f, indent=1)
        f.write("\n")
    with open("crates/voltpolicy/data/profiles37.json", "w") as f:
        json.dump({"t_points": 240, "buses": profiles}, f, indent=1)
        f.write("\n")
    mapping = {old: new for old, new in sorted(number.items(), key=lambda kv: kv[1])}
    print("bus numbering (original -> bundled):", mapping)
    print(f"N = {n}, lines = {len(lines)}")
    print("controlled:", sorted(CONTROLLED), "solar:", sorted(SOLAR_BUSES))


if __name__ == "__main__":
    main()
