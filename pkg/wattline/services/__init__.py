"""Collectors, attribution, emissions, registry and gate logic"""
