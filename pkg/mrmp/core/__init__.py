"""Numerical core: tensors, reverse-mode autodiff, optimizer"""
