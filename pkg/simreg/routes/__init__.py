"""
HTTP routes package
"""
