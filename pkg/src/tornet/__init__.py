"""TorNet: temporal-oriented broadcast residual network for binary audio classification."""

__version__ = "0.1.0"
