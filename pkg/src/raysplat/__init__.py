"""Memory-efficient differentiable rendering and splatting over voxel grids and triplanes."""
from .errors import ContractViolation, DimensionError, DomainError, FormatError
from .execution import ExecConfig
from .hash3d import (ContractConfig, TriPlane, VoxelGrid, contract, interpolation_weights,
                     make_structure, random_structure, read_grid, sample, sample_vjp,
                     splat_accumulate, write_grid)
from .instrument import FlopCounter, ScratchArena
from .rays import (Camera, RayBundle, RaySamples, rays_from_camera, read_camera, sample_points,
                   write_camera)
from .renderer import (RenderGrads, RenderOutput, reconstruct_transmittance_check, render,
                       render_backward_fused, render_forward_fused, transmittance_profile)
from .splatter import (SplatInputs, SplatResult, TargetSpec, splat_backward_fused,
                       splat_forward_fused, splat_plain)
from .tinymlp import (DirEncConfig, MlpParams, default_mlp, direnc, init_mlp, mlp_forward,
                      mlp_vjp, read_mlps, write_mlps)

__version__ = "0.1.0"

__all__ = [
    "Camera", "ContractConfig", "ContractViolation", "DimensionError", "DirEncConfig",
    "DomainError", "ExecConfig", "FlopCounter", "FormatError", "MlpParams", "RayBundle",
    "RaySamples", "RenderGrads", "RenderOutput", "ScratchArena", "SplatInputs", "SplatResult",
    "TargetSpec", "TriPlane", "VoxelGrid", "contract", "default_mlp", "direnc", "init_mlp",
    "interpolation_weights", "make_structure", "mlp_forward", "mlp_vjp", "random_structure",
    "rays_from_camera", "read_camera", "read_grid", "read_mlps", "reconstruct_transmittance_check",
    "render", "render_backward_fused", "render_forward_fused", "sample", "sample_points",
    "sample_vjp", "splat_accumulate", "splat_backward_fused", "splat_forward_fused", "splat_plain",
    "transmittance_profile", "write_camera", "write_grid", "write_mlps",
]
