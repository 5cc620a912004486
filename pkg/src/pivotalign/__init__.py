"""Image-pivoted cross-lingual alignment for low-resource translation.

The package is organised as a small numpy-backed stack: `tensor` (reverse-mode
autodiff), `model` (transformer blocks and the visual encoder), `losses`
(cross-entropy and the contrastive objectives), `data` (synthetic scene
corpus), `training` (two-stage optimisation), `evaluation` (beam search, BLEU,
retrieval and diagnostics) and `cli` (the pivot-align command).

Import submodules directly, e.g. ``from pivotalign import tensor``.
"""

__version__ = "0.1.0"
