"""MrMP - Multi-relation Message Passing for multi-label classification"""

__version__ = "1.0.0"
