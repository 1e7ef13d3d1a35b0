"""Label-free adaptation of a frozen vision-language classifier."""

__version__ = "0.1.0"
