"""masklab: critic-guided masked token generation on exactly enumerable worlds."""

__version__ = "0.1.0"
