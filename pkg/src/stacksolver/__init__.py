"""Neural math word problem solver with a dual symbolic/semantic stack decoder."""

__version__ = "0.1.0"

from . import corpus, decoder, encoder, eqlang, numerics, trainer  # noqa: F401
