"""Synthesize contrast-enhanced cardiac CT from plain CT with a numpy encoder/decoder.

Modules: ``tensor`` (autodiff), ``model``, ``loss``, ``phantom``,
``registration``, ``metrics``, ``trainer`` and ``cli``.
"""

__version__ = "0.1.0"
