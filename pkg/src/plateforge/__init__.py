"""plateforge: synthetic license-plate corpora and ALPR benchmarking."""

__version__ = "0.1.0"
