"""discolift: norm-bounded lifted discrepancy models for nominal linear plants."""

__version__ = "0.1.0"
