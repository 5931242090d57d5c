"""Multilingual unsupervised translation with per-language denoising adapters.

A self-contained seq2seq stack: a small pre-LN transformer trained with
span-mask denoising on synthetic monolingual corpora, per-language
bottleneck adapters trained on top of the frozen base, composition of a
source encoder adapter with a target decoder adapter at inference, and
transfer to translation by fine-tuning only cross-attention on
pivot-centric parallel data.
"""

__version__ = "0.1.0"
