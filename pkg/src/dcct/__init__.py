"""Detector for synthesized images based on demosaicing-trace color correlation.

Main entry points: :mod:`dcct.pipeline` (training and detection),
:mod:`dcct.estimators` (scikit-learn style wrappers) and the ``dcct`` CLI.
"""
__version__ = "0.1.0"

from .estimators import ConditionalColorModel, DCCTClassifier, OneClassDCCT  # noqa: E402
from .pipeline import DetectorBundle, TrainConfig  # noqa: E402

__all__ = ["ConditionalColorModel", "DCCTClassifier", "OneClassDCCT", "DetectorBundle", "TrainConfig"]
