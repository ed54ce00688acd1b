"""
Rail Rescheduling Engine - Knowledge Package
"""
