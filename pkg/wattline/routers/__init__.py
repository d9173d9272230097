"""HTTP endpoints for the exporter, registry and gate"""
