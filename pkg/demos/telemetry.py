"""Per-hop telemetry from three monitor functions.

Each monitor appends a record with its POP, the time, and the queuing and
processing delay accrued since the previous record. Packets older than
the threshold at a monitor are reported to the manager once.
"""

from _common import preset
from sfcsim.experiments import simulate
from sfcsim.netfuncs import telemetry_records

run = simulate(preset("hp_monitoring"))
recs = [r for rs in run.net.deliveries.values() for r in rs]
for r in recs[:5]:
    hops = ", ".join(f"pop {int(p)} q={q * 1e3:.2f}ms p={pr * 1e3:.2f}ms"
                     for p, _, q, pr in telemetry_records(r))
    print(f"seq {r.seq:3d}: {hops}")
print(f"{run.net.control_counters['reports']} of {len(recs)} packets exceeded the budget")
