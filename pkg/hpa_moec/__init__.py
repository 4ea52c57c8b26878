"""
hpa-moec - Hybrid Parameterized Action, Multi-objective Ensemble Critic lab

Highway driving with lane-change options carrying continuous path length and
acceleration, learned by per-objective critic ensembles whose disagreement
guides exploration. Ships an IDM/MOBIL ring-road simulator and HighD-format
trajectory replay.
"""

try:
    from ._version import version as __version__
except ImportError:  # pragma: no cover
    __version__ = "0.1.0"
