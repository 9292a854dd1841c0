"""Incremental multi-task object detection at desk scale.

Synthetic shape scenarios, a small two-stage detector with one branch per
task, attentive feature distillation against a frozen teacher, adaptive
exemplar replay and VOC-style evaluation with forgetting matrices.
"""

__version__ = "0.1.0"
