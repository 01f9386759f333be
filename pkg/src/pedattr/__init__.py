"""Prompt-fused pedestrian attribute recognition.

Frozen vision/text transformer encoders, per-attribute multi-head
cross-attention fusion, multi-task classification heads with a composite
cross-entropy + focal + label-smoothing loss, hand-derived gradients for
the trainable fusion/head parameters, and an mA/F1 evaluation harness with
an ablation comparison.
"""

__version__ = "0.1.0"
