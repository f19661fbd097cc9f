"""seqflow: sequential scene flow estimation and point cloud forecasting
on a deterministic, CPU-only numerical core."""

__version__ = "0.1.0"
