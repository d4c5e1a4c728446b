"""Single-projection volumetric reconstruction and tumor segmentation toolkit."""

__version__ = "0.1.0"
