"""cribtag: sound-event tagging for infant-centric home soundscapes."""

__version__ = "0.1.0"
