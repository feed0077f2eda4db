"""Attention-mask guided adversarial attacks against explanation-based monitors.

Submodules: ``tensor`` (autodiff), ``rng``, ``nn`` (model graphs), ``explain``
(IG, LRP), ``mute`` (mixture masks), ``attacks``, ``monitor`` (similarity
monitor and metrics), ``train``, ``data``, ``benchmark``, ``config``, ``cli``.
"""

__version__ = "0.1.0"
