"""Fail the POP hosting a chain's function under both failover modes.

Proactive failover keeps a disjoint backup reserved and switches to it as
soon as the failure is detected. Reactive failover re-maps the chain only
after the failure, so the interruption is longer but nothing sits idle.
"""

from _common import preset
from sfcsim.experiments import simulate

scn = preset("failover")
for mode in ("proactive", "reactive"):
    report = simulate(scn, failover=mode).manager.report()
    for app, rec in report.items():
        for r in rec["recoveries"]:
            if not r["affected"]:
                continue
            print(f"{mode:9s} app {app}: interruption {r['interruptions']['1'] * 1000:6.1f} ms, "
                  f"CPU reserved before failure {r['reserved_cpu_before']:.0f}")
