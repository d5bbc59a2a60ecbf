"""Joint motion estimation and dynamic image reconstruction for MPI."""

__version__ = "0.1.0"
