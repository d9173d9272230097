"""Configuration, logging, security and errors"""
