"""Dense bundle adjustment with re-projection, feature-metric and inertial
factors, confidence weighting, sliding-window VIO and global BA, plus a
synthetic-world generator for testing all of it."""

__version__ = "0.1.0"
