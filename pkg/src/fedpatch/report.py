"""Markdown result tables: one per (dataset, partition), defenses as rows and
an (MTA, BA) column pair per attack. Rendering depends only on the rows given."""
from __future__ import annotations

import re
from collections import defaultdict

import numpy as np

from .metrics import MetricsRow

ATTACK_ORDER = ("none", "mra", "dba", "neurotoxin")
ATTACK_TITLES = {"none": "No attack", "mra": "MRA", "dba": "DBA", "neurotoxin": "Neurotoxin"}
DEFENSE_ORDER = ("none", "median_krum", "foolsgold", "flame", "norm_clip", "patch")
DEFENSE_TITLES = {"none": "No Defense", "median_krum": "MedianKrum", "foolsgold": "FoolsGold", "flame": "FLAME",
                  "norm_clip": "NormClip", "patch": "Trigger synthesis + patching"}
DATASET_TITLES = {"mnist": "MNIST", "fashion-mnist": "Fashion-MNIST"}

# Published (MTA, BA) for aggregators we do not implement, per table and attack.
# The no-attack BA is not reported there and is left as None.
REFERENCE_ROWS = {
    ("mnist", "iid"): {
        "LFighter": {"none": (0.974, None), "mra": (0.968, 0.0), "dba": (0.970, 0.0), "neurotoxin": (0.969, 0.0)},
        "RoseAgg": {"none": (0.972, None), "mra": (0.970, 0.985), "dba": (0.973, 0.0), "neurotoxin": (0.967, 0.0)},
    },
    ("fashion-mnist", "iid"): {
        "LFighter": {"none": (0.865, None), "mra": (0.865, 0.0), "dba": (0.866, 0.0), "neurotoxin": (0.860, 0.0)},
        "RoseAgg": {"none": (0.867, None), "mra": (0.861, 0.973), "dba": (0.864, 0.976),
                    "neurotoxin": (0.841, 0.016)},
    },
    ("mnist", "niid"): {
        "LFighter": {"none": (0.979, None), "mra": (0.979, 0.991), "dba": (0.980, 0.990), "neurotoxin": (0.977, 0.0)},
        "RoseAgg": {"none": (0.962, None), "mra": (0.974, 0.988), "dba": (0.968, 0.983),
                    "neurotoxin": (0.977, 0.989)},
    },
    ("fashion-mnist", "niid"): {
        "LFighter": {"none": (0.877, None), "mra": (0.852, 0.984), "dba": (0.862, 0.988),
                     "neurotoxin": (0.856, 0.685)},
        "RoseAgg": {"none": (0.844, None), "mra": (0.865, 0.988), "dba": (0.844, 0.983),
                    "neurotoxin": (0.836, 0.715)},
    },
}

_SCENARIO = re.compile(r"^(?P<dataset>[a-z-]+?)-(?P<part>iid|niid[0-9.e+-]*)-(?P<attack>[a-z_]+)-(?P<defense>[a-z_]+)"
                       r"-s(?P<seed>-?\d+)$")

HEADER = "# Results\n"


def table_key(row: MetricsRow) -> tuple:
    m = _SCENARIO.match(row.scenario)
    if m is None:
        return (row.scenario, "")
    return (m["dataset"], m["part"])


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def _table(dataset: str, part: str, rows) -> list:
    cells = defaultdict(list)
    for r in rows:
        cells[(r.defense, r.attack)].append(r)
    attacks = [a for a in ATTACK_ORDER if any(k[1] == a for k in cells)]
    attacks += sorted({k[1] for k in cells} - set(attacks))
    defenses = [d for d in DEFENSE_ORDER if any(k[0] == d for k in cells)]
    defenses += sorted({k[0] for k in cells} - set(defenses))
    scenario = "i.i.d." if part == "iid" else f"non-i.i.d. ({part})"
    out = [f"## {DATASET_TITLES.get(dataset, dataset)}, {scenario}", ""]
    head = "| Defense | " + " | ".join(f"{ATTACK_TITLES.get(a, a)} MTA | {ATTACK_TITLES.get(a, a)} BA" for a in attacks)
    out += [head + " |", "|---" + "|---:" * (2 * len(attacks)) + "|"]
    for d in defenses:
        line = [DEFENSE_TITLES.get(d, d)]
        for a in attacks:
            group = cells.get((d, a), [])
            if group:
                mta = float(np.mean([g.mta for g in group]))
                ba = float(np.mean([g.ba for g in group]))
                line += [f"{mta:.3f}", f"{ba:.3f}"]
            else:
                line += ["", ""]
        out.append("| " + " | ".join(line) + " |")
    base = "niid" if part.startswith("niid") else part
    for name, values in REFERENCE_ROWS.get((dataset, base), {}).items():
        line = [f"{name} (published)"]
        for a in attacks:
            mta, ba = values.get(a, (None, None))
            line += [_fmt(mta), _fmt(ba)]
        out.append("| " + " | ".join(line) + " |")
    seeds = sorted({r.seed for r in rows})
    out += ["", f"Cells are means over seeds {seeds}. Published rows are reference values, not re-run.", ""]
    return out


def _per_seed(rows) -> list:
    out = ["## Per-seed rows", "", "| Scenario | Defense | Attack | Seed | Rounds | MTA | BA |",
           "|---|---|---|---:|---:|---:|---:|"]
    for r in sorted(rows, key=lambda r: (r.scenario, r.seed)):
        out.append(f"| {r.scenario} | {r.defense} | {r.attack} | {r.seed} | {r.rounds} | {r.mta:.4f} | {r.ba:.4f} |")
    return out + [""]


def render_report(rows) -> str:
    """Markdown for a list of MetricsRows; an empty list gives only the header."""
    rows = list(rows)
    lines = [HEADER]
    if not rows:
        return "\n".join(lines)
    groups = defaultdict(list)
    for r in rows:
        groups[table_key(r)].append(r)
    for (dataset, part) in sorted(groups):
        lines += _table(dataset, part, groups[(dataset, part)])
    lines += _per_seed(rows)
    return "\n".join(lines)
