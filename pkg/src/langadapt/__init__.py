"""Parameter-efficient adaptation of a small GPT-style LM to new languages."""

__version__ = "0.1.0"
