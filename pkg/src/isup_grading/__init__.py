"""Weakly supervised ISUP grading of prostate biopsy slides from slide-level labels.

Modules follow the pipeline order: ``tiling`` and ``stain`` prepare patches,
``mil`` pseudo-labels them, ``ssl`` pre-trains the encoder, ``grader``
fine-tunes an attention-MIL ordinal head, ``metrics`` scores it and
``pipeline``/``cli`` tie the stages together. ``synth`` builds a corpus with
planted ground truth.
"""

__version__ = "0.1.0"
