"""Double a flow's rate, then halve it again, and watch the controller.

The bottleneck function gains an instance a few monitoring ticks after the
load step and gives it back once the load drops.
"""

from _common import preset
from sfcsim.experiments import simulate

scn = preset("scaling")
run = simulate(scn)
for change in scn.traffic[0]["schedule"]:
    print(f"t={change['at']:.1f} s  rate -> {change['rate_pps']} pps")
for rec in run.manager.apps.values():
    print(f"activated at {rec.activated_at:.3f} s")
    for e in rec.scaling:
        print(f"t={e.time:.1f} s  {e.kind:9s} {e.instance} applied={e.applied}")
    print("final instance counts:", rec.plan.vt.counts())
print("packets refused before activation:",
      run.report.flows["1"]["counters"].get("dropped_inactive", 0))
