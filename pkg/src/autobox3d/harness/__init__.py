from . import dataio, evaluate, scene

__all__ = ["dataio", "evaluate", "scene"]
