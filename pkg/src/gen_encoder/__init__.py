"""Query intent encoder trained from co-click weak supervision."""
from .encoder import EncoderConfig, GenEncoder, Vocabulary, tokenize

__all__ = ["EncoderConfig", "GenEncoder", "Vocabulary", "tokenize"]
__version__ = "0.1.0"
