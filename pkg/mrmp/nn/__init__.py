"""Network layers, MrMP model and training objective"""
