"""Desk-scale language model laboratory.

Thin wrapper over the compiled core: BPE tokenization, set-transformer
language models with exact decoding algorithms, discrete-diffusion
sequence generation, and exact-ground-truth evaluation on synthetic
Markov languages.
"""

try:
    from lmlab._core import *  # noqa: F401,F403  (installed layout)
    from lmlab import _core as core  # noqa: F401
except ImportError:  # build-tree layout: the module sits on PYTHONPATH directly
    from _core import *  # noqa: F401,F403
    import _core as core  # noqa: F401

__all__ = [name for name in dir(core) if not name.startswith("_")]
