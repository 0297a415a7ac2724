"""Deterministic lab for MultiPaxos, Raft* and their lease and Mencius variants."""

__version__ = "0.1.0"
