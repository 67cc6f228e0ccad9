"""Feature unlearning on synthetic planted-glyph images.

Modules: ``tensor`` (autodiff), ``data`` (glyph datasets), ``models``
(classifier, remover, identifier), ``adversarial`` (annotated unlearning),
``identify`` (filter grouping), ``blind`` (mask-based unlearning),
``evaluation`` (metrics and attacks), ``experiments`` (end-to-end runs) and
``cli``.
"""

__version__ = "0.1.0"
