"""fedcycle - federated learning simulator with cyclic server aggregation."""

__version__ = "0.1.0"
