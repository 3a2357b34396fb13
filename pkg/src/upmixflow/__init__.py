"""Stereo to 7.1.4 upmixing with a conditional flow-matching model over per-channel latents."""

__version__ = "0.1.0"
