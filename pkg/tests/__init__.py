"""
Test suite for dtskit.
"""
