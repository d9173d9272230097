"""Wattline - per-workload energy and emissions monitoring"""

__version__ = "0.1.0"
