"""
Configuration settings
"""
