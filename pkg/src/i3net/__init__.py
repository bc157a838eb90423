"""Axial slice interpolation for anisotropic medical volumes."""

from .model import I3Net, ModelConfig, synthesize_volume
from .volformat import PhantomSpec, Volume, gen_phantom, read_volume, write_volume

__all__ = [
    "I3Net",
    "ModelConfig",
    "PhantomSpec",
    "Volume",
    "gen_phantom",
    "read_volume",
    "synthesize_volume",
    "write_volume",
]
__version__ = "0.1.0"
