#!/usr/bin/env python3
"""Generates the bundled scenario directories under scenarios/.

Every bundle is a scenario.json plus loads.csv (and pv.csv when it has PV).
Output is deterministic: rerunning rewrites identical files.
"""

import argparse
import csv
import json
import math
import random
from pathlib import Path

INTERVALS_PER_DAY = 288

# Baran-Wu 33-bus feeder: (from, to, r_ohm, x_ohm) and per-bus (kW, kvar).
IEEE33_BRANCHES = [
    (1, 2, 0.0922, 0.0470), (2, 3, 0.4930, 0.2511), (3, 4, 0.3660, 0.1864), (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070), (6, 7, 0.1872, 0.6188), (7, 8, 0.7114, 0.2351), (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400), (10, 11, 0.1966, 0.0650), (11, 12, 0.3744, 0.1238), (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129), (14, 15, 0.5910, 0.5260), (15, 16, 0.7463, 0.5450), (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740), (2, 19, 0.1640, 0.1565), (19, 20, 1.5042, 1.3554), (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373), (3, 23, 0.4512, 0.3083), (23, 24, 0.8980, 0.7091), (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034), (26, 27, 0.2842, 0.1447), (27, 28, 1.0590, 0.9337), (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585), (30, 31, 0.9744, 0.9630), (31, 32, 0.3105, 0.3619), (32, 33, 0.3410, 0.5302),
]
IEEE33_LOADS = {
    2: (100, 60), 3: (90, 40), 4: (120, 80), 5: (60, 30), 6: (60, 20), 7: (200, 100), 8: (200, 100),
    9: (60, 20), 10: (60, 20), 11: (45, 30), 12: (60, 35), 13: (60, 35), 14: (120, 80), 15: (60, 10),
    16: (60, 20), 17: (60, 20), 18: (90, 40), 19: (90, 40), 20: (90, 40), 21: (90, 40), 22: (90, 40),
    23: (90, 50), 24: (420, 200), 25: (420, 200), 26: (60, 25), 27: (60, 25), 28: (60, 20), 29: (120, 70),
    30: (200, 600), 31: (150, 70), 32: (210, 100), 33: (60, 40),
}
IEEE33_KV = 12.66


def num(x):
    """Rounds generated values so the CSV text stays short and stable."""
    return float(f"{x:.6g}")


def load_shape(t):
    """Residential daily shape in [0.45, 1.0] with an evening peak."""
    h = t * 24.0 / INTERVALS_PER_DAY
    morning = 0.15 * math.exp(-((h - 8.0) / 1.5) ** 2)
    evening = 0.45 * math.exp(-((h - 19.0) / 2.5) ** 2)
    midday = 0.10 * math.exp(-((h - 13.0) / 3.0) ** 2)
    return 0.45 + morning + evening + midday


def pv_shape(t, rng, clouds):
    """Clear-sky bell from 06:00 to 18:00 with optional passing clouds."""
    h = t * 24.0 / INTERVALS_PER_DAY
    if h <= 6.0 or h >= 18.0:
        return 0.0
    base = math.sin(math.pi * (h - 6.0) / 12.0) ** 1.3
    if clouds:
        base *= 1.0 - 0.15 * rng.random() * (rng.random() < 0.2)
    return base


def bus(id_, kv, kind=None, v_set=None):
    b = {"id": id_, "base_kv": kv}
    if kind:
        b["kind"] = kind
    if v_set is not None:
        b["v_set"] = v_set
    return b


def branch(id_, f, t, r, x, rating, tap=None):
    b = {"id": id_, "from": f, "to": t, "r": num(r), "x": num(x), "rating": rating}
    if tap:
        b["tap"] = tap
    return b


def pv(id_, bus_id, s, tier, cost=1.0):
    return {"id": id_, "bus": bus_id, "kind": "pv_inverter", "s_rating": s, "dr_cost": cost, "tier": tier}


def ieee33_feeder(fid, prefix, base_mva, head, load_scale):
    """Returns (feeder json, {bus: (p, q)} nominal loads in pu)."""
    zb = IEEE33_KV ** 2 / base_mva
    name = lambda n: head if n == 1 else f"{prefix}{n}"
    buses = [bus(name(n), IEEE33_KV) for n in range(2, 34)]
    branches = [
        branch(f"{prefix}l{t}", name(f), name(t), r / zb, x / zb, 1.0) for (f, t, r, x) in IEEE33_BRANCHES
    ]
    loads = {name(n): (load_scale * p / 1000 / base_mva, load_scale * q / 1000 / base_mva)
             for n, (p, q) in IEEE33_LOADS.items()}
    return {"id": fid, "head_bus": head, "buses": buses, "branches": branches}, loads


def write_bundle(root, name, doc, loads, pv_series=None):
    d = root / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "scenario.json").write_text(json.dumps(doc, indent=2) + "\n")
    with open(d / "loads.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["interval", "bus", "p_pu", "q_pu"])
        for row in loads:
            w.writerow(row)
    pv_path = d / "pv.csv"
    if pv_series:
        with open(pv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["interval", "der", "p_avail_pu"])
            for row in pv_series:
                w.writerow(row)
    elif pv_path.exists():
        pv_path.unlink()


def daily_series(horizon, nominal, ders, rng, clouds=True, load_shape_fn=load_shape):
    loads, pvs = [], []
    for t in range(horizon):
        k = load_shape_fn(t)
        for b, (p, q) in nominal.items():
            loads.append([t, b, num(p * k), num(q * k)])
        shape = pv_shape(t, rng, clouds)
        for d in ders:
            pvs.append([t, d["id"], num(d["s_rating"] * 0.98 * shape)])
    return loads, pvs


def two_bus(root):
    doc = {
        "name": "two_bus",
        "base_mva": 10,
        "buses": [bus("H", 12.47, "slack", 1.0)],
        "feeders": [{
            "id": "F", "head_bus": "H",
            "buses": [bus("B", 12.47)],
            "branches": [branch("L", "H", "B", 0.01, 0.02, 1.0)],
        }],
        "sim": {"horizon": 12, "seed": 1},
    }
    loads = [[t, "B", 0.1, 0.05] for t in range(12)]
    write_bundle(root, "two_bus", doc, loads)


def three_bus(root):
    """Meshed sub-transmission triangle with an on-load tap changer and a
    small feeder carrying two inverters and a switched capacitor."""
    doc = {
        "name": "three_bus",
        "base_mva": 100,
        "buses": [bus("S", 69, "slack", 1.0), bus("A", 69), bus("H", 69)],
        "branches": [
            branch("la", "S", "A", 0.01, 0.05, 5.0),
            branch("lh", "S", "H", 0.03, 0.09, 5.0),
            branch("tx", "A", "H", 0.005, 0.04, 5.0, {"ratio": 1.0, "min": 0.95, "max": 1.05}),
        ],
        "feeders": [{
            "id": "F", "head_bus": "H",
            "buses": [bus("F1", 12.47), bus("F2", 12.47)],
            "branches": [branch("fl1", "H", "F1", 0.01, 0.02, 2.0), branch("fl2", "F1", "F2", 0.01, 0.02, 2.0)],
            "ders": [pv("pv1", "F1", 0.08, "fan", 1.0), pv("pv2", "F2", 0.1, "nan", 2.0)],
            "capacitors": [{"id": "c1", "bus": "F2", "q_step": 0.03, "n_steps": 1, "state": 0}],
        }],
        "sim": {"horizon": 12, "seed": 1},
    }
    loads, pvs = [], []
    for t in range(12):
        loads += [[t, "A", 0.6, 0.25], [t, "F1", 0.2, 0.08], [t, "F2", 0.3, 0.12]]
        pvs += [[t, "pv1", num(0.04 + 0.003 * t)], [t, "pv2", num(0.05 + 0.004 * t)]]
    write_bundle(root, "three_bus", doc, loads, pvs)


def ieee33_day(root):
    """33-bus feeder behind a 69 kV line and an on-load tap changer, with
    heavy rooftop PV towards the feeder ends on a clear day."""
    base = 10
    feeder, nominal = ieee33_feeder("F33", "n", base, "n1", 0.5)
    ders = [
        pv("pv13", "n13", 0.02, "fan"), pv("pv14", "n14", 0.02, "nan"), pv("pv15", "n15", 0.02, "nan"),
        pv("pv16", "n16", 0.02, "fan"), pv("pv17", "n17", 0.025, "nan"), pv("pv18", "n18", 0.03, "fan"),
        pv("pv25", "n25", 0.02, "nan"), pv("pv30", "n30", 0.02, "fan"), pv("pv31", "n31", 0.02, "nan"),
        pv("pv32", "n32", 0.02, "nan"), pv("pv33", "n33", 0.025, "fan"),
    ]
    feeder["ders"] = ders
    doc = {
        "name": "ieee33_high_pv",
        "base_mva": base,
        "buses": [bus("S", 69, "slack", 1.03), bus("T", 69), bus("n1", IEEE33_KV)],
        "branches": [
            branch("st", "S", "T", 0.004, 0.02, 2.0),
            branch("tx", "T", "n1", 0.002, 0.03, 2.0, {"ratio": 1.0, "min": 0.95, "max": 1.05}),
        ],
        "capacitors": [{"id": "ct", "bus": "T", "q_step": 0.05, "n_steps": 2, "state": 0}],
        "feeders": [feeder],
        "sim": {"horizon": INTERVALS_PER_DAY, "seed": 7},
    }
    rng = random.Random(33)
    loads, pvs = daily_series(INTERVALS_PER_DAY, nominal, ders, rng)
    write_bundle(root, "ieee33_high_pv", doc, loads, pvs)


def td_two_feeder(root):
    """Two 33-bus feeders on a meshed 69 kV ring; grouped by substation."""
    base = 10
    f1, n1 = ieee33_feeder("FA", "a", base, "HA", 0.4)
    f2, n2 = ieee33_feeder("FB", "b", base, "HB", 0.4)
    f1["ders"] = [pv("pva18", "a18", 0.08, "nan"), pv("pva33", "a33", 0.08, "fan"), pv("pva25", "a25", 0.06, "ami")]
    f2["ders"] = [pv("pvb18", "b18", 0.07, "fan"), pv("pvb22", "b22", 0.06, "ami"), pv("pvb33", "b33", 0.07, "nan")]
    f2["capacitors"] = [{"id": "cb30", "bus": "b30", "q_step": 0.02, "n_steps": 1, "state": 0}]
    doc = {
        "name": "td_two_feeder",
        "base_mva": base,
        "buses": [
            bus("S", 69, "slack", 1.02), bus("A", 69), bus("B", 69),
            bus("HA", IEEE33_KV), bus("HB", IEEE33_KV),
        ],
        "branches": [
            branch("sa", "S", "A", 0.006, 0.03, 3.0),
            branch("sb", "S", "B", 0.008, 0.04, 3.0),
            branch("ab", "A", "B", 0.01, 0.05, 3.0),
            branch("txa", "A", "HA", 0.002, 0.03, 2.0, {"ratio": 1.0, "min": 0.95, "max": 1.05}),
            branch("txb", "B", "HB", 0.002, 0.03, 2.0, {"ratio": 1.0, "min": 0.95, "max": 1.05}),
        ],
        "capacitors": [{"id": "ca", "bus": "A", "q_step": 0.04, "n_steps": 2, "state": 0}],
        "feeders": [f1, f2],
        "sim": {
            "horizon": 96,
            "seed": 11,
            "scada_poll_period_s": 2,
            "groups": [
                {"id": "north", "feeders": ["FA"], "buses": ["S", "A", "HA"]},
                {"id": "south", "feeders": ["FB"], "buses": ["B", "HB"]},
            ],
        },
    }
    rng = random.Random(2)
    nominal = {**n1, **n2, "A": (0.3, 0.1), "B": (0.25, 0.08)}
    # Start the 96 intervals at 08:00 so the window spans the PV peak.
    shape = lambda t: load_shape(t + 96)
    loads, _ = daily_series(96, nominal, [], rng, load_shape_fn=shape)
    pvs = []
    for t in range(96):
        s = pv_shape(t + 96, rng, True)
        for d in f1["ders"] + f2["ders"]:
            pvs.append([t, d["id"], num(d["s_rating"] * 0.98 * s)])
    write_bundle(root, "td_two_feeder", doc, loads, pvs)


def islands(root):
    """Two electrically separate systems, each with its own slack."""
    buses, feeders, loads, pvs = [], [], [], []
    for k, (r, pv_s, tier) in enumerate([(0.01, 0.1, "nan"), (0.02, 0.08, "fan")], start=1):
        head = f"H{k}"
        buses.append(bus(head, 12.47, "slack", 1.0))
        fb = [bus(f"I{k}{n}", 12.47) for n in range(1, 4)]
        br = [branch(f"L{k}{n}", head if n == 1 else f"I{k}{n-1}", f"I{k}{n}", r, 2 * r, 1.0) for n in range(1, 4)]
        feeders.append({"id": f"F{k}", "head_bus": head, "buses": fb, "branches": br,
                        "ders": [pv(f"pv{k}", f"I{k}3", pv_s, tier, float(k))]})
    doc = {
        "name": "islands",
        "base_mva": 10,
        "buses": buses,
        "feeders": feeders,
        "sim": {
            "horizon": 24,
            "seed": 5,
            "groups": [{"id": "g1", "feeders": ["F1"], "buses": ["H1"]},
                       {"id": "g2", "feeders": ["F2"], "buses": ["H2"]}],
        },
    }
    for t in range(24):
        for k in (1, 2):
            for n in range(1, 4):
                loads.append([t, f"I{k}{n}", num(0.03 + 0.002 * n + 0.001 * t), num(0.01 + 0.001 * n)])
            pvs.append([t, f"pv{k}", num(0.04 + 0.002 * t * k)])
    write_bundle(root, "islands", doc, loads, pvs)


def benign(root):
    """Budget leg times on constant, loss-free, unconstrained links."""
    const = lambda mean: {"distribution": "constant", "mean_s": mean, "sigma": 0, "bandwidth_bps": None, "loss_prob": 0}
    doc = {
        "name": "benign",
        "base_mva": 10,
        "buses": [bus("H", 12.47, "slack", 1.0)],
        "feeders": [{
            "id": "F", "head_bus": "H",
            "buses": [bus("B1", 12.47), bus("B2", 12.47), bus("B3", 12.47)],
            "branches": [branch("L1", "H", "B1", 0.01, 0.02, 1.0), branch("L2", "B1", "B2", 0.01, 0.02, 1.0),
                         branch("L3", "B2", "B3", 0.01, 0.02, 1.0)],
            "ders": [pv("pv", "B3", 0.1, "nan")],
        }],
        "sim": {
            "horizon": INTERVALS_PER_DAY,
            "seed": 1,
            "budget": {"ems_solve_s": 45, "ems_to_dms_s": 15, "dms_solve_s": 30,
                       "dms_der_roundtrip_s": 120, "dms_to_ems_s": 60},
            "links": {
                "ems_to_dms": const(15), "dms_to_ems": const(60), "substation_lan": const(60),
                "fan": const(60), "nan": const(60), "ami": const(60),
            },
        },
    }
    rng = random.Random(9)
    nominal = {"B1": (0.05, 0.02), "B2": (0.05, 0.02), "B3": (0.04, 0.01)}
    loads, pvs = daily_series(INTERVALS_PER_DAY, nominal, doc["feeders"][0]["ders"], rng)
    write_bundle(root, "benign", doc, loads, pvs)


def broken_cycle(root):
    """Deliberately invalid: a loop inside the feeder."""
    doc = {
        "name": "broken_cycle",
        "base_mva": 10,
        "buses": [bus("H", 12.47, "slack", 1.0)],
        "feeders": [{
            "id": "F", "head_bus": "H",
            "buses": [bus("a", 12.47), bus("b", 12.47)],
            "branches": [branch("l1", "H", "a", 0.01, 0.02, 1.0), branch("l2", "a", "b", 0.01, 0.02, 1.0),
                         branch("l3", "b", "H", 0.01, 0.02, 1.0)],
        }],
        "sim": {"horizon": 1},
    }
    write_bundle(root, "broken_cycle", doc, [[0, "a", 0.1, 0.0], [0, "b", 0.1, 0.0]])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    root = Path(ap.parse_args().out)
    root.mkdir(parents=True, exist_ok=True)
    for make in (two_bus, three_bus, ieee33_day, td_two_feeder, islands, benign, broken_cycle):
        make(root)


if __name__ == "__main__":
    main()
