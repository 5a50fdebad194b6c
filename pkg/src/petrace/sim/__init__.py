"""Deterministic population simulator, audits and attack scenarios."""
