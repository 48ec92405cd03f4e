"""IRCAM audio-visual navigation.

Iterative residual cross-attention agents, a grid-world audio-visual
simulator, PPO training and navigation metrics on a small numpy autodiff core.
"""

from ._version import __version__
