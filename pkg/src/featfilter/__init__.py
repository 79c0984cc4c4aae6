"""Closed-form feature filters for segmentation networks, written on numpy.

Modules: ``tensor`` (conv/pool primitives and FSM1 I/O), ``layers``
(trainable blocks), ``nets`` (mini U-net / FCN), ``entropy`` (binary
information entropy probe), ``metrics`` (Dice / Hausdorff), ``synthdata``
(synthetic cardiac-like scenes), ``train`` (Adam training and checkpoints),
``checks`` (verification suites) and ``cli``.
"""

__version__ = "0.1.0"
