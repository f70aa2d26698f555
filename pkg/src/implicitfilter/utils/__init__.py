"""Random streams, CSV output, and logging helpers."""
