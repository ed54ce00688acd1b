"""
Rail Rescheduling Engine - Services Package
"""
