"""Non-uniform temporal aggregation for video networks, on a small numpy
autodiff core."""

from pathlib import Path

__version__ = "0.1.0"

CONFIG_DIR = Path(__file__).parent / "configs"


def config_path(name: str) -> Path:
    """Path of a shipped config (``"toy"`` or ``"toy.cfg"``)."""
    p = CONFIG_DIR / (name if name.endswith(".cfg") else name + ".cfg")
    if not p.exists():
        raise FileNotFoundError(f"no shipped config {name!r} in {CONFIG_DIR}")
    return p
