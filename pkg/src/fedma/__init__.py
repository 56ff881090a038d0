"""Federated matched averaging: layer-wise neuron matching for federated learning."""

__version__ = "0.1.0"
