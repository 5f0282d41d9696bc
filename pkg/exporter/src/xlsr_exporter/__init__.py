"""Standalone exporter: frozen wav2vec2/XLS-R hidden states -> .mosf files."""

__version__ = "0.1.0"
