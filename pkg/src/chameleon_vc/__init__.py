"""Layer-mixing voice conversion with an adversarial speaker loss, at desk scale."""

__version__ = "0.1.0"
