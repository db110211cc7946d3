"""Medical concept representations, trajectory augmentation and a frozen-representation evaluation harness."""

__version__ = "0.1.0"
