"""Few-shot vibration fault diagnosis: CWT images, text-aligned visual features, prompted LoRA transformers,
reverse-adapter distillation and cloud/edge head synchronisation."""

__version__ = "0.1.0"
