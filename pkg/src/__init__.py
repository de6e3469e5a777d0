"""NOMA handover simulator with a hash-chained public key registry."""
