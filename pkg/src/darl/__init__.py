"""Distribution-aware robust learning for graded relevance at desk scale.

Pipeline pieces: synthetic corpus generation (``dataset``), distribution-aware
OOD sample selection (``ood_select``), a small scorer with calibrated loss
(``model``), multi-stage probe/finetune/interpolate training (``lpft``),
metrics and experiment harnesses (``metrics``, ``harness``), and a CLI
(``cli``).
"""

__version__ = "0.1.0"
