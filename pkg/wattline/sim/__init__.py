"""Synthetic cluster, mock TSDB and scrape driver for hardware-free runs"""
