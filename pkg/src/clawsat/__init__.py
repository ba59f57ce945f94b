"""Robust-and-accurate code models at desk scale.

Pipeline: tokenized toy corpora -> obfuscation views (random and
adversarial) -> contrastive pre-training -> ST/AT/SAT fine-tuning ->
F1 evaluation and robustness diagnostics.
"""

__version__ = "0.1.0"
