"""Sparse-aware global SfM optimization: shared block-sparse LM engine with
global positioning and bundle adjustment solvers on top."""

from . import _kernels
from .ba import BAProblem, ba_jacobian, ba_residuals, prune, run_ba
from .gp import GPProblem, fix_gauge, gp_jacobian, gp_residuals, make_rays, run_gp
from .lm import (IterationRecord, LMConfig, SolveReport, Workspace, lm_solve,
                 renormalize, solve_normal)
from .scene import (BAL_RADIAL, PINHOLE, Camera, Observation, Point3D,
                    RobustLoss, Scene, project, robust_weight, rotate)
from .sparse_block import (BlockLayout, BlockNormalSystem, BlockSparseJacobian,
                           apply_damping, jtj, jtr)

__version__ = "0.1.0"

kernel_backend = _kernels.backend_name
