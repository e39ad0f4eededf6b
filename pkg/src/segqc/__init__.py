"""segqc: ground-truth-free quality monitoring for lung lesion segmentation.

Four lightweight features (connected components, intensity mode, slice
smoothness, lung containment) feed linear quality models; per-site agents
aggregate predictions into privacy-preserving reports for a central monitor.
"""

from .errors import SegQCError
from .features import FEATURE_VERSION, FeatureVector, extract_features
from .models import TrainedModel, predict, train_linear_svm, train_logistic, train_ridge
from .volume import Mask, Volume, resample

__version__ = "0.1.0"

__all__ = [
    "FEATURE_VERSION",
    "FeatureVector",
    "Mask",
    "SegQCError",
    "TrainedModel",
    "Volume",
    "extract_features",
    "predict",
    "resample",
    "train_linear_svm",
    "train_logistic",
    "train_ridge",
    "__version__",
]
