"""
Rail Rescheduling Engine - CLI Package
"""
