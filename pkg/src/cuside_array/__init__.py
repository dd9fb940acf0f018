""" Streaming multi-channel CTC speech recognition with context-sensitive chunking,
mask-based MVDR beamforming and simulated future context.
"""
import logging

__version__ = "2025.0.1"

logging.getLogger(__name__).addHandler(logging.NullHandler())
