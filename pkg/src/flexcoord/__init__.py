"""Hierarchical flexibility coordination of energy storage fleets.

The library dispatches storage flexibility through a tree of aggregators,
compares the outcome against a perfect-information monolithic coordinator,
and quantifies the aggregation error and aggregation efficiency of the
hierarchy. See README.md for the CLI and file formats.
"""

from .model import (
    EssParams,
    FpuLimits,
    Schedule,
    TimeGrid,
    ValidationError,
    apply_flexibility,
    check_feasibility,
    pte_ratio,
    soc_propagate,
    timeseries,
    validate_params,
)

__version__ = "0.1.0"
