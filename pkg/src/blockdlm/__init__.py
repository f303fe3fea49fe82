"""Desk-scale block-diffusion LM engine.

Everything runs on CPU in float64 so that cache-vs-recompute and
gradient-vs-finite-difference comparisons hold at tight tolerances.
"""

from blockdlm.vocab import (
    Modality,
    ModalitySpan,
    TokenSequence,
    TokenVocabulary,
    build_vocabulary,
    annotate_image_block,
)

__all__ = [
    "Modality",
    "ModalitySpan",
    "TokenSequence",
    "TokenVocabulary",
    "build_vocabulary",
    "annotate_image_block",
]

__version__ = "0.1.0"
