from importlib import resources
from pathlib import Path

from sfcsim.scenario import load


def preset(name):
    """Load one of the scenario files bundled with the package."""
    return load(Path(str(resources.files("sfcsim") / "presets" / f"{name}.yaml")))
