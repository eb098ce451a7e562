"""Configuration Package"""
