"""Replay one lost packet against end-to-end and assisted transport.

The same packet is dropped on the last link in both runs. End-to-end
recovery waits for the source's timer; the Transport Assistant in the
middle of the path repairs it from its cache over the short segment.
"""

from _common import preset
from sfcsim.experiments import run_experiment

bundle = run_experiment(preset("network_assisted_transport"))
for label in ("baseline", "assisted"):
    for rec in bundle.data["runs"][label]["simulation"]["recoveries"]:
        print(f"{label:9s} seq {rec['seq']:3d} repaired by {rec['by']} "
              f"after {rec['recovery_delay'] * 1000:6.2f} ms "
              f"(timer {rec['retransmission_delay'] * 1000:.0f} ms)")
summary = bundle.summary["recovery"]["7"]
ratio = summary["assisted_recovery_mean"] / summary["baseline_recovery_mean"]
print(f"assisted / baseline recovery delay: {ratio:.2f}")
