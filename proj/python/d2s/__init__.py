"""Sparse descriptor-to-3D-coordinate regression with reliability-aware pose solving."""

try:
    from d2s._d2s import (  # wheel layout: extension lives inside the package
        Architecture,
        EngineError,
        Frame,
        Model,
        full_scale_architecture,
        project,
        pseudo_label,
        read_frame,
        reliability,
        solve_pose,
        train,
        write_frame,
    )
except ImportError:  # in-tree layout: extension sits on PYTHONPATH
    from _d2s import (
        Architecture,
        EngineError,
        Frame,
        Model,
        full_scale_architecture,
        project,
        pseudo_label,
        read_frame,
        reliability,
        solve_pose,
        train,
        write_frame,
    )

__all__ = [
    "Architecture",
    "EngineError",
    "Frame",
    "Model",
    "full_scale_architecture",
    "project",
    "pseudo_label",
    "read_frame",
    "reliability",
    "solve_pose",
    "train",
    "write_frame",
]
