"""Text-grounded contrastive learning for open-world segmentation, at desk scale.

Subpackages are imported lazily by callers; importing ``tclseg`` itself is cheap.
"""

__version__ = "0.1.0"
