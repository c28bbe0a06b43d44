"""Multiscale tree of SRF and BN classifiers for multichannel lesion segmentation."""
from .grid import LabelMap, MultiChannelImage, ProbabilityMap

__version__ = "0.1.0"
__all__ = ["LabelMap", "MultiChannelImage", "ProbabilityMap", "__version__"]
