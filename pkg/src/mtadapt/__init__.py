"""Desk-scale multi-task transfer learning: pretrain, adapt the pyramid neck, then finetune.

Covers object detection, semantic segmentation and drivable-area segmentation on
synthetic partially labeled driving scenes, with optional language-guided
prompt adaptation of the coarsest pyramid level.
"""

__version__ = "0.1.0"


def __getattr__(name):
    # keep ``import mtadapt`` light; the estimator pulls in scikit-learn
    if name == "MultiTaskTransfer":
        from .estimator import MultiTaskTransfer

        return MultiTaskTransfer
    raise AttributeError(name)
