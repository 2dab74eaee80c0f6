"""Quantile-based rigid masking for joint depth, pose and optical-flow learning.

Modules:
    geometry: pinhole camera, SE(3) poses, rigid flow and its Jacobians.
    warp: bilinear warping, SSIM, photometric error and their adjoints.
    quantile: delta maps, P-square streaming quantiles, neighbourhood masks.
    losses: individual loss terms with analytic gradients.
    objective: the multi-scale training objective in three modes.
    grad: finite-difference checking and the gradient suite.
    synth: procedural scenes with exact depth, flow and motion masks.
    cotrain: toy co-training, analysis helpers and the stability model.
    io: PPM, PFM, manifest and CSV formats.
    cli: the ``coopnet`` command.
"""

__version__ = "0.1.0"
