"""Grounded multiple-choice reasoning over text and object features.

The package builds up in layers: ``tensor`` (array math with reverse-mode
gradients), ``attention`` (multi-head attention primitives), ``fusion``
(text/object feature merging), ``encoder`` (stacked co-attention blocks with
an external memory), ``head`` (sequence reduction and candidate scoring),
``taskdata`` (synthetic grounded-QA corpus), and ``pipeline`` modules
(``model``, ``train``, ``metrics``, ``checkpoint``, ``report``, ``cli``).
"""

__version__ = "0.1.0"
