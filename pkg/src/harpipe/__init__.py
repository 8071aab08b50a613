"""Semi-supervised HAR: teacher-student self-training with transformation pre-training."""

__version__ = "0.1.0"
