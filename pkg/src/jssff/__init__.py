"""Edge-aware dual-stream remote-sensing image captioning at desk scale.

Modules: ``imagecore`` (NetPBM, edge detectors), ``nncore`` (layers, Adam,
gradient checks), ``encoder`` (CNN and fusion operators), ``captioner``
(single / early / late models, training, checkpoints), ``search`` (greedy,
beam, CBBS), ``metrics`` (BLEU, METEOR-lite, ROUGE-L, CIDEr-D), ``corpus``
(datasets, vocabulary, synthetic scenes) and ``cli``.
"""

__version__ = "0.1.0"
