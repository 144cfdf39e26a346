"""Joint text-to-speech-and-gesture synthesis via conditional flow matching,
with a synthetic-corpus pipeline and objective evaluation machinery."""

__version__ = "0.1.0"
