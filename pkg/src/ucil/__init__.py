"""Class-incremental sound event detection with distillation, unlabeled sample selection and balanced rehearsal."""

__version__ = "0.1.0"
