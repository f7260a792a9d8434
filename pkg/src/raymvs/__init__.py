"""Multi-view stereo with per-ray implicit depth refinement on analytic scenes."""

__version__ = "0.1.0"

from raymvs import cost_volume, frustum_context, geometry, kernels, ray_field, synth_scenes  # noqa: F401
