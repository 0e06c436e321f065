"""Build the JSON feeder fixtures under crates/core/fixtures.

The IEEE-123 deck is read from an OpenDSS directory given on the command
line (IEEE123Master.dss, IEEE123Loads.DSS, IEEELineCodes.DSS). IEEE-13 and
IEEE-37 use the line codes from the same IEEELineCodes.DSS plus the segment
and spot-load tables of the published feeder reports, embedded below.

usage: python3 tools/make_fixtures.py <opendss-ieee123-dir>
"""

import json
import math
import re
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "fixtures"
PH = {"1": 0, "2": 1, "3": 2}
PAIR = {(0, 1): 0, (1, 2): 1, (2, 0): 2, (1, 0): 0, (2, 1): 1, (0, 2): 2}


def parse_linecodes(path):
    codes = {}
    cur = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line.startswith("!") or not line:
            continue
        m = re.match(r"new linecode\.(\S+)\s+nphases=(\d)", line, re.I)
        if m:
            cur = {"n": int(m.group(2))}
            codes[m.group(1)] = cur
            continue
        m = re.match(r"~\s*(rmatrix|xmatrix)\s*=\s*[\[(](.*?)[\])]", line, re.I)
        if m and cur is not None:
            rows = [r.split() for r in m.group(2).split("|")]
            n = cur["n"]
            mat = [[0.0] * n for _ in range(n)]
            for i, row in enumerate(rows):
                for j, v in enumerate(row):
                    mat[i][j] = float(v)
                    mat[j][i] = float(v)
            cur[m.group(1).lower()[0]] = mat
    return codes


def z_ohm(code, order, length_kft):
    """3x3 [re, im] matrix in ohm for a line using `order` phase slots."""
    z = [[[0.0, 0.0] for _ in range(3)] for _ in range(3)]
    for a, pa in enumerate(order):
        for b, pb in enumerate(order):
            z[pa][pb] = [code["r"][a][b] * length_kft, code["x"][a][b] * length_kft]
    return z


def phases_str(order):
    return "".join("abc"[p] for p in sorted(order))


def write(name, data):
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / f"{name}.json").write_text(json.dumps(data, indent=1) + "\n")
    print("wrote", name, len(data["lines"]), "lines")


def wye(bus, phase, kw, kvar):
    p = [0.0, 0.0, 0.0]
    q = [0.0, 0.0, 0.0]
    p[phase] = kw
    q[phase] = kvar
    return {"bus": bus, "connection": "wye", "kw": p, "kvar": q}


def delta(bus, kw, kvar):
    return {"bus": bus, "connection": "delta", "kw": kw, "kvar": kvar}


def ieee13(codes):
    abc = [0, 1, 2]
    segs = [
        ("650", "632", "601", abc, 2000),
        ("632", "670", "601", abc, 667),
        ("670", "671", "601", abc, 1333),
        ("671", "680", "601", abc, 1000),
        ("632", "633", "602", abc, 500),
        ("632", "645", "603", [1, 2], 500),
        ("645", "646", "603", [1, 2], 300),
        ("692", "675", "606", abc, 500),
        ("671", "684", "604", [0, 2], 300),
        ("684", "611", "605", [2], 300),
        ("684", "652", "607", [0], 800),
    ]
    lines = [
        {"from": f, "to": t, "phases": phases_str(o), "z_ohm": z_ohm(codes[c], o, ft / 1000)}
        for f, t, c, o, ft in segs
    ]
    loads = [
        delta("671", [385, 385, 385], [220, 220, 220]),
        wye("634", 0, 160, 110),
        wye("634", 1, 120, 90),
        wye("634", 2, 120, 90),
        wye("645", 1, 170, 125),
        delta("646", [0, 230, 0], [0, 132, 0]),
        delta("692", [0, 0, 170], [0, 0, 151]),
        wye("675", 0, 485, 190),
        wye("675", 1, 68, 60),
        wye("675", 2, 290, 212),
        wye("611", 2, 170, 80),
        wye("652", 0, 128, 86),
        wye("670", 0, 17, 10),
        wye("670", 1, 66, 38),
        wye("670", 2, 117, 68),
    ]
    return {
        "name": "ieee13",
        "source": "IEEE 13-node test feeder; line codes from IEEELineCodes.DSS (ohm/kft); "
        "substation transformer and regulator removed, switch 671-692 closed, "
        "distributed load lumped at node 670.",
        "power_base_kva": 1000.0,
        "voltage_base_kv": 4.16 / math.sqrt(3),
        "substation": "650",
        "voltage_band_pct": 5.0,
        "load_flex": {"p": 0.2, "q": 0.2},
        "buses": [{"id": "634", "voltage_base_kv": 0.48 / math.sqrt(3)}],
        "lines": lines,
        "transformers": [
            {"from": "633", "to": "634", "phases": "abc", "kva": 500.0, "r_pct": 1.1, "x_pct": 2.0}
        ],
        "switches": [{"from": "671", "to": "692", "closed": True}],
        "loads": loads,
        "capacitors": [
            {"bus": "675", "kvar": [200, 200, 200]},
            {"bus": "611", "kvar": [0, 0, 100]},
        ],
    }


IEEE37_SEGMENTS = """
701 702 960 722
702 705 400 724
702 713 360 723
702 703 1320 722
703 727 240 724
703 730 600 723
704 714 80 724
704 720 800 723
705 742 320 724
705 712 240 724
706 725 280 724
707 724 760 724
707 722 120 724
708 733 320 723
708 732 320 724
709 731 600 723
709 708 320 723
710 735 200 724
710 736 1280 724
711 741 400 723
711 740 200 724
713 704 520 723
714 718 520 724
720 707 920 724
720 706 600 723
727 744 280 723
730 709 200 723
733 734 560 723
734 737 640 723
734 710 520 724
737 738 400 723
738 711 400 723
744 728 200 724
744 729 280 724
799 701 1850 721
"""

# bus: ab kW, ab kvar, bc kW, bc kvar, ca kW, ca kvar
IEEE37_LOADS = """
701 140 70 140 70 350 175
712 0 0 0 0 85 40
713 0 0 0 0 85 40
714 17 8 21 10 0 0
718 85 40 0 0 0 0
720 0 0 0 0 85 40
722 0 0 140 70 21 10
724 0 0 42 21 0 0
725 0 0 42 21 0 0
727 0 0 0 0 42 21
728 42 21 42 21 42 21
729 42 21 0 0 0 0
730 0 0 0 0 85 40
731 0 0 85 40 0 0
732 0 0 0 0 42 21
733 85 40 0 0 0 0
734 0 0 0 0 42 21
735 0 0 0 0 85 40
736 0 0 42 21 0 0
737 140 70 0 0 0 0
738 126 62 0 0 0 0
740 0 0 0 0 85 40
741 0 0 0 0 42 21
742 8 4 85 40 0 0
744 42 21 0 0 0 0
"""


def ieee37(codes):
    abc = [0, 1, 2]
    lines = []
    for row in IEEE37_SEGMENTS.split("\n"):
        if not row.strip():
            continue
        f, t, ft, c = row.split()
        lines.append(
            {"from": f, "to": t, "phases": "abc", "z_ohm": z_ohm(codes[c], abc, float(ft) / 1000)}
        )
    loads = []
    for row in IEEE37_LOADS.split("\n"):
        if not row.strip():
            continue
        v = row.split()
        n = [float(x) for x in v[1:]]
        loads.append(delta(v[0], [n[0], n[2], n[4]], [n[1], n[3], n[5]]))
    return {
        "name": "ieee37",
        "source": "IEEE 37-node test feeder; line codes 721-724 from IEEELineCodes.DSS (ohm/kft), "
        "segment and spot-load tables from the feeder report; substation regulator removed, "
        "all loads constant-power delta.",
        "power_base_kva": 1000.0,
        "voltage_base_kv": 4.8 / math.sqrt(3),
        "substation": "799",
        "voltage_band_pct": 3.0,
        "load_flex": {"p": 0.2, "q": 0.2},
        "buses": [{"id": "775", "voltage_base_kv": 0.48 / math.sqrt(3)}],
        "lines": lines,
        "transformers": [
            {"from": "709", "to": "775", "phases": "abc", "kva": 500.0, "r_pct": 0.09, "x_pct": 1.81}
        ],
        "switches": [],
        "loads": loads,
        "capacitors": [],
    }


def bus_spec(s):
    parts = s.split(".")
    return parts[0].lower(), [PH[p] for p in parts[1:] if p in PH]


def ieee123(codes, deck):
    master = (deck / "IEEE123Master.dss").read_text().splitlines()
    lines = []
    switches = []
    for raw in master:
        line = raw.strip()
        if line.startswith("!"):
            continue
        kv = dict(re.findall(r"(\w+)=(\S+)", line))
        kv = {k.lower(): v for k, v in kv.items()}
        if re.match(r"new line\.sw", line, re.I):
            f, _ = bus_spec(kv["bus1"])
            t, _ = bus_spec(kv["bus2"])
            # Sw7 (151-300) and Sw8 (54-94) are normally open ties.
            closed = (f, t) not in {("151", "300"), ("54", "94")}
            switches.append({"from": f, "to": t, "closed": closed})
        elif re.match(r"new line\.", line, re.I):
            f, of = bus_spec(kv["bus1"])
            t, _ = bus_spec(kv["bus2"])
            code = codes[kv["linecode"]]
            order = of if of else [0, 1, 2]
            assert len(order) == code["n"], line
            lines.append(
                {
                    "from": f,
                    "to": t,
                    "phases": phases_str(order),
                    "z_ohm": z_ohm(code, order, float(kv["length"])),
                }
            )
    # Regulators are removed: both terminals become one bus.
    for f, t in [("150", "150r"), ("9", "9r"), ("25", "25r"), ("160", "160r")]:
        switches.append({"from": f, "to": t, "closed": True})

    loads = []
    for raw in (deck / "IEEE123Loads.DSS").read_text().splitlines():
        line = raw.strip()
        if not re.match(r"new load\.", line, re.I):
            continue
        kv = {k.lower(): v for k, v in re.findall(r"(\w+)=(\S+)", line)}
        bus, ph = bus_spec(kv["bus1"])
        kw = float(kv["kw"])
        kvar = float(kv["kvar"])
        nph = int(kv["phases"])
        conn = kv["conn"].lower()
        if nph == 3:
            loads.append({"bus": bus, "connection": "wye", "kw": [kw / 3] * 3, "kvar": [kvar / 3] * 3})
        elif conn == "delta":
            k = PAIR[(ph[0], ph[1])]
            p = [0.0] * 3
            q = [0.0] * 3
            p[k] = kw
            q[k] = kvar
            loads.append(delta(bus, p, q))
        else:
            loads.append(wye(bus, ph[0], kw, kvar))
    # Four added three-phase delta loads on trunk buses without spot loads.
    for bus in ["13", "18", "67", "97"]:
        loads.append(delta(bus, [20.0, 20.0, 20.0], [10.0, 10.0, 10.0]))

    return {
        "name": "ieee123",
        "source": "IEEE 123-node test feeder, OpenDSS deck (IEEE123Master.dss, IEEE123Loads.DSS, "
        "IEEELineCodes.DSS); regulators removed, switches at default status, loads taken as "
        "constant power, four three-phase delta loads added at nodes 13, 18, 67 and 97.",
        "power_base_kva": 1000.0,
        "voltage_base_kv": 4.16 / math.sqrt(3),
        "substation": "150",
        "voltage_band_pct": 5.0,
        "load_flex": {"p": 0.2, "q": 0.2},
        "buses": [{"id": "610", "voltage_base_kv": 0.48 / math.sqrt(3)}],
        "lines": lines,
        "transformers": [
            {"from": "61s", "to": "610", "phases": "abc", "kva": 150.0, "r_pct": 1.27, "x_pct": 2.72}
        ],
        "switches": switches,
        "loads": loads,
        "capacitors": [
            {"bus": "83", "kvar": [200, 200, 200]},
            {"bus": "88", "kvar": [50, 0, 0]},
            {"bus": "90", "kvar": [0, 50, 0]},
            {"bus": "92", "kvar": [0, 0, 50]},
        ],
    }


def main():
    deck = Path(sys.argv[1])
    codes = parse_linecodes(deck / "IEEELineCodes.DSS")
    write("ieee13", ieee13(codes))
    write("ieee37", ieee37(codes))
    write("ieee123", ieee123(codes, deck))


if __name__ == "__main__":
    main()
