"""
Services package: preprocessing, simulation, resampling, metrics, networks, pipelines and I/O
"""
