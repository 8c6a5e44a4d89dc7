"""
Service modules for the mmdsfi toolkit
"""
