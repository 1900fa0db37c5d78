"""
Balanced accuracy and one-vs-rest reports
=========================================

Class imbalance is the norm in polyp corpora, so every score here is a
balanced accuracy: the mean of per-class recalls, or per class the mean of
sensitivity and specificity.
"""

import numpy as np

from polypcascade.metrics import (SIX_CLASSES, ConfusionMatrix, balanced_accuracy,
                                  collapse_to_type, one_vs_rest_report, present)

# A classifier biased towards the low-grade classes
counts = np.array([
    [43, 4, 0, 3, 0, 0],
    [5, 60, 0, 9, 0, 2],
    [0, 2, 12, 14, 2, 0],
    [1, 6, 3, 150, 0, 10],
    [0, 1, 2, 4, 18, 15],
    [0, 3, 0, 12, 5, 60],
])
cm = ConfusionMatrix(SIX_CLASSES, counts)
print(cm.format())
print("plain accuracy   ", present(np.trace(counts) / counts.sum()))
print("balanced accuracy", present(balanced_accuracy(cm)))
print()
print(one_vs_rest_report(cm).format())
print()

# Merging grades gives the per-type view
print(one_vs_rest_report(collapse_to_type(cm)).format())
