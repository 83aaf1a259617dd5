"""endofuse: handcrafted texture features fused with CNN features.

Desk-scale, dependency-light pipeline: masked radiomics-style feature
extraction, a densely connected convolutional backbone with a
projection head, an MLP feature embedder, concatenation fusion and a
classification head, trained with Adam and evaluated with weighted
metrics and per-class ROC/AUC.
"""

__version__ = "0.1.0"
