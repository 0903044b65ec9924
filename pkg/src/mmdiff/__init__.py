"""Joint audio-video diffusion with a coupled U-Net and zero-shot conditioning."""

__version__ = "0.1.0"
