"""Lung CT segmentation engine: FCN with dense pooling connections and
dilated convolution blocks, CPU autodiff, CT preprocessing, generalized
Dice training with cross-validation, evaluation, and a synthetic phantom
test bed."""

__version__ = "0.1.0"
