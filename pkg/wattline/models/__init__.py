"""Value types and API schemas"""
