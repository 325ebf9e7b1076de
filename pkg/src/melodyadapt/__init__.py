"""melodyadapt: interactive singing-melody adaptation.

A frame-wise pitch classifier with a trained confidence head picks the
frames it is least sure about, a human (or oracle) annotates them, and
inner-loop optimization adapts the classifier to the new audio domain.
"""

__version__ = "0.1.0"
