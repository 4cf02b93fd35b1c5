from fbflow.core.dynamics import FlowField, energy, fb_iterate, field, subgradient_witness
from fbflow.core.integrator import Trajectory, integrate, resample

__all__ = ["FlowField", "field", "energy", "subgradient_witness", "fb_iterate", "Trajectory", "integrate", "resample"]
