"""
Rail Rescheduling Engine - Models Package
"""
