"""Run every bundled preset and write its report bundle under ``out/``.

The DetNet preset sends 100 000 packets and takes several seconds.
"""

import sys
from importlib import resources
from pathlib import Path

from sfcsim.experiments import run_experiment
from sfcsim.scenario import load

out = Path(sys.argv[1] if len(sys.argv) > 1 else "out")
for path in sorted(Path(str(resources.files("sfcsim") / "presets")).glob("*.yaml")):
    bundle = run_experiment(load(path))
    bundle.write(out / path.stem)
    flows = bundle.summary["flows"]
    for run, per_flow in flows.items():
        for fid, f in per_flow.items():
            print(f"{path.stem:28s} {run:9s} flow {fid}: sent {f['sent']}, "
                  f"delivered {f['delivered']}")
