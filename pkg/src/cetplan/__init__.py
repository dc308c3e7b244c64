"""Mixed-precision bit planning from the geometry of the loss Hessian."""
from .errors import (
    CetError,
    ConfigurationError,
    ContractViolation,
    InfeasibleTarget,
    NoConstraintError,
    NumericalError,
    OracleRefused,
    SpectralBreakdown,
)
from .io import Checkpoint, load_checkpoint, load_dataset, save_checkpoint, save_dataset
from .model import Dataset, ModelSpec, LayerSpec, ParameterVector, Objective, mlp
from .planner import PlannerConfig, PlanReport, plan
from .quantizer import ALLOWED_BITS, BitPlan
from .spectral import LanczosConfig, Spectrum, lanczos
from .subspace import SolverConfig, solve_delta

__version__ = "0.1.0"

__all__ = [
    "ALLOWED_BITS", "BitPlan", "CetError", "Checkpoint", "ConfigurationError", "ContractViolation", "Dataset",
    "InfeasibleTarget", "LanczosConfig", "LayerSpec", "ModelSpec", "NoConstraintError", "NumericalError",
    "Objective", "OracleRefused", "ParameterVector", "PlanReport", "PlannerConfig", "SolverConfig", "Spectrum",
    "SpectralBreakdown", "lanczos", "load_checkpoint", "load_dataset", "mlp", "plan", "save_checkpoint",
    "save_dataset", "solve_delta",
]
