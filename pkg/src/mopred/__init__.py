"""Recovery-first multimodal motion prediction on synthetic driving scenes."""

__version__ = "0.1.0"
