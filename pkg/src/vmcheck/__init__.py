"""vmcheck: an x86-64 virtual-memory machine fragment plus a resource
checker for separation-logic style specifications over instruction
sequences, including address-space-relative assertions."""

__version__ = "0.1.0"
