"""Cross-modal 2D/3D representation learning at desk scale."""
__version__ = "0.1.0"
