"""shiftseg: robust point-cloud segmentation training with a quantized
confusion prior and semantic-shift region localization."""

__version__ = "0.1.0"
