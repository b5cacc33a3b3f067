"""splatforge: point clouds to 3D Gaussian splats, rendered on the CPU.

Pipeline: PLY cloud -> splat estimator (global isotropic, local PCA, or a
sparse-conv network) -> depth-sorted tile splatting (RGB / normal / depth /
relit) -> metrics, per-scene fitting with analytic gradients, and a
frame-streaming service for interactive viewing.
"""

__version__ = "0.1.0"
