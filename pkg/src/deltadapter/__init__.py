"""Exemplar-pair image editing with a delta adapter on a frozen flow backbone.

A numpy-only toy implementation: a small reverse-mode autodiff engine, a
frozen patch encoder, a rectified-flow transformer, the adapter that turns
the feature difference of an exemplar pair into edit tokens, training,
evaluation and a command line front end.

Submodules are imported on demand so ``deltadapter.cli`` can set BLAS thread
counts before numpy loads.
"""

__version__ = "0.1.0"
