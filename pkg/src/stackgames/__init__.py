"""Two-agent feedback Stackelberg trajectory games and leadership inference."""

__version__ = "0.1.0"
