"""Agent-based SIR (ASIR) and compartmental SIR engines with an equivalence verifier."""

__version__ = "1.0.0"
