"""Reinforced UI instruction grounding at desk scale.

A screenshot plus a text instruction go in; the target element's
bounding box comes out, decoded autoregressively as digit tokens by a
tiny encoder-decoder transformer trained with token cross-entropy plus
an IoU-rewarded policy-gradient objective.
"""

__version__ = "0.1.0"
