"""octosim: a cycle-level simulator for dataflow workloads on a tiled
wafer-scale fabric with two-level (TBU and cluster) scheduling."""

__version__ = "0.1.0"
