"""Rig-like 3D control over a frozen face-image generator.

Subpackages cover the full pipeline: a tape-based autodiff engine
(:mod:`facerig.autodiff`), the parametric face model
(:mod:`facerig.facemodel`), a differentiable point-splat renderer
(:mod:`facerig.render`), the frozen synthetic generator and training corpus
(:mod:`facerig.generator`), the latent-to-parameter reconstruction network
(:mod:`facerig.reconstruct`), the cycle-consistent rig mapping network
(:mod:`facerig.rigmap`), analysis instruments (:mod:`facerig.analysis`), and
serving/persistence (:mod:`facerig.checkpoint`, :mod:`facerig.cli`,
:mod:`facerig.server`).
"""

__version__ = "0.1.0"
