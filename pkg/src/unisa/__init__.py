"""Label-free few-shot continual learning on synthetic task sequences.

Submodules: ``tensor`` (autodiff), ``model``, ``clustering``, ``losses``, ``ball``,
``trainer``, ``data``, ``metrics``, ``config``, ``experiment``, ``oracles``, ``cli``.
"""

__version__ = "0.1.0"
