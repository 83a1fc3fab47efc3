"""revvolnet: reversible volumetric segmentation networks on a tiny tape engine.

Kept intentionally light so that the CLI can configure threading environment
variables before any numerical module is imported.
"""

__version__ = "0.1.0"
