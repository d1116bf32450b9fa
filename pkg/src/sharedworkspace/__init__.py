"""Shared-workspace communication for modular neural architectures.

Specialists (transformer positions, recurrent modules, or mechanisms)
compete to write into a small slot memory whose contents are broadcast back
to every specialist.  The package includes a minimal reverse-mode autodiff
engine, transformer/recurrent/mechanism host models, procedural tasks with
independent oracles, gradient verification, and a communication-complexity
benchmark.
"""

__version__ = "0.1.0"
