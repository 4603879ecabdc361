"""Coal maceral segmentation toolkit.

Pieces, bottom up:

- ``tensor``     float64 arrays + reverse-mode autodiff (conv, norm, gelu, ...)
- ``dcsa``       dilation-based convolutional self-attention block
- ``model``      four-stage pyramid encoder + lightweight fusion decode head
- ``checkpoint`` binary weight snapshots with integrity digests
- ``data``       palette-coded datasets, augmentation, folds, synthetic blobs
- ``metrics``    confusion matrix, pixel accuracy, IoU
- ``train``      Adam training loop, evaluation, five-fold cross-validation
- ``service``    closed-loop review service (ingest -> review -> retrain -> swap)
- ``report``     delimited outputs plus matplotlib figures
- ``cli``        command line front end over all of the above
"""

__version__ = "0.1.0"
