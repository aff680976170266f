"""Flow-matching lyric editing lab on an exactly invertible toy singing world."""

__version__ = "0.1.0"
