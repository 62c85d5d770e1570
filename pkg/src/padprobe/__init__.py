"""Probing how padding lets a video dynamics model recover object positions."""

__version__ = "0.1.0"

from .backbone import Backbone, BackboneConfig, InputMode, PaddingMode
from .dataset import DatasetManifest, DatasetName, build_dataset, generate_dataset, load_dataset
from .model import DynamicsModel
from .sim_core import EnvContext, EnvKind, WorldState, init_world, simulate, step

__all__ = [
    "Backbone", "BackboneConfig", "DatasetManifest", "DatasetName", "DynamicsModel", "EnvContext", "EnvKind",
    "InputMode", "PaddingMode", "WorldState", "build_dataset", "generate_dataset", "init_world", "load_dataset",
    "simulate", "step",
]
