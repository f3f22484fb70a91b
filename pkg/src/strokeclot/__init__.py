"""Stroke clot origin classification toolkit.

Slide preprocessing (:mod:`.wsi`), augmentation (:mod:`.augment`), patient
metadata and folds (:mod:`.dataset`), the WMCLL metric (:mod:`.metrics`),
classifier-head training (:mod:`.trainer`) and prediction handling
(:mod:`.predictions`).
"""

__version__ = "0.1.0"
