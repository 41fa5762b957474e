"""Desk-scale pipeline that adds discrete speech tokens to a small causal LM.

Stages: residual-VQ tokenization of audio frames, lasso-based selection of
label-informative audio tokens, audio-embedding pretraining with a frozen
backbone, and LoRA classification fine-tuning, plus the ablation and
evaluation harness around them.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
