"""Multi-graph spatio-temporal GCN (MSTGCN) for daily toll-station exit flow forecasting."""

__version__ = "0.1.0"
