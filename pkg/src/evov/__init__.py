"""Execute-order-validate permissioned ledger with a simulated network."""

__version__ = "0.1.0"
