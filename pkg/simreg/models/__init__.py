"""
Data models package: volumes, fields, label maps, configurations, reports
"""
